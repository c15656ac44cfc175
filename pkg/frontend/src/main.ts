import './style.css';
import { getHealth, getMeta, postNavigate, postPredict, postWhatif } from './api';
import { currentAction, prefillFromRecommendation, sliderSpecs } from './controls';
import type { SliderSpec } from './controls';
import {
  renderGateBar,
  renderNavigationList,
  renderPhaseBar,
  renderPollutantTable,
  renderScenarioCard,
  renderSliders
} from './panels';
import type { Meta, NavigateResponse, Prediction, Scenario } from './types';

interface AppState {
  meta: Meta | null;
  window: number[][] | null;
  baseline: Prediction | null;
  sliders: SliderSpec[];
  scenarios: Scenario[];
  nav: NavigateResponse | null;
  busy: boolean;
  error: string | null;
  health: string;
}

const state: AppState = {
  meta: null,
  window: null,
  baseline: null,
  sliders: [],
  scenarios: [],
  nav: null,
  busy: false,
  error: null,
  health: 'connecting'
};

async function init() {
  try {
    const [health, meta] = await Promise.all([getHealth(), getMeta()]);
    state.health = health.status;
    state.meta = meta;
    state.sliders = sliderSpecs(meta);
  } catch (err: any) {
    state.error = err.message || 'failed to reach the twin API';
  }
  render();
  wireEvents();
}

function setBusy(on: boolean) {
  state.busy = on;
  render();
}

async function loadWindow(text: string) {
  if (!state.meta) return;
  state.error = null;
  try {
    const parsed = JSON.parse(text);
    const w: number[][] = Array.isArray(parsed) ? parsed : parsed.window;
    if (!Array.isArray(w) || w.length !== state.meta.window_length) {
      throw new Error(`window must have ${state.meta.window_length} rows`);
    }
    state.window = w;
    setBusy(true);
    state.baseline = await postPredict(w);
    state.scenarios = [];
    state.nav = null;
  } catch (err: any) {
    state.error = err.message;
    state.window = null;
    state.baseline = null;
  } finally {
    setBusy(false);
  }
}

async function evaluateAction() {
  if (!state.window) return;
  state.error = null;
  setBusy(true);
  try {
    const sc = await postWhatif(state.window, currentAction(state.sliders));
    state.scenarios.unshift(sc);
    state.scenarios = state.scenarios.slice(0, 6);
  } catch (err: any) {
    state.error = err.message;
  } finally {
    setBusy(false);
  }
}

async function runNavigate() {
  if (!state.window || !state.meta) return;
  state.error = null;
  const checked = Array.from(
    document.querySelectorAll<HTMLInputElement>('.module-check:checked')
  ).map((el) => el.value);
  setBusy(true);
  try {
    state.nav = await postNavigate(
      state.window,
      checked.length ? checked : null,
      8
    );
  } catch (err: any) {
    state.error = err.message;
  } finally {
    setBusy(false);
  }
}

function pickRecommendation(index: number) {
  if (!state.nav) return;
  const rec = state.nav.ranked[index];
  if (!rec) return;
  state.sliders = prefillFromRecommendation(state.sliders, rec.action);
  render();
}

function render() {
  const app = document.querySelector<HTMLDivElement>('#app');
  if (!app || !state.meta) {
    if (app) {
      app.innerHTML = `<div class="boot">${state.error ?? 'Connecting to the twin API...'}</div>`;
    }
    return;
  }
  const m = state.meta;
  app.innerHTML = `
    <header>
      <h1>Emission Twin Console</h1>
      <span class="health ${state.health === 'ok' ? 'ok' : ''}">${state.health}</span>
    </header>
    ${state.error ? `<div class="error-banner">${state.error}</div>` : ''}
    <div class="columns">
      <section class="col">
        <h3>Operating window</h3>
        <textarea id="window-input" rows="5" spellcheck="false"
          placeholder='paste a ${m.window_length}x${m.features.length} raw window as JSON'></textarea>
        <button id="load-btn" ${state.busy ? 'disabled' : ''}>Load & predict</button>
        ${state.baseline ? `
          <h3>Current prediction</h3>
          ${renderPollutantTable(state.baseline, m.targets)}
          <h4>Process phase</h4>
          ${renderPhaseBar(state.baseline, m.phases)}
          <h4>Expert routing</h4>
          ${renderGateBar(state.baseline, m.experts)}` : ''}
      </section>
      <section class="col">
        <h3>Action sliders</h3>
        ${renderSliders(state.sliders)}
        <button id="whatif-btn" ${state.busy || !state.window ? 'disabled' : ''}>Evaluate action</button>
        <h3>Navigation</h3>
        <div class="module-picks">
          ${m.modules
            .map(
              (mod) => `<label><input type="checkbox" class="module-check"
                value="${mod.name}" checked> ${mod.name.replace(/_/g, ' ')}</label>`
            )
            .join('')}
        </div>
        <button id="nav-btn" ${state.busy || !state.window ? 'disabled' : ''}>Find best moves</button>
        ${state.nav ? renderNavigationList(state.nav) : ''}
      </section>
      <section class="col">
        <h3>Scenarios</h3>
        ${state.scenarios.length
          ? state.scenarios
              .map((sc, i) => renderScenarioCard(sc, m.targets, `scenario ${state.scenarios.length - i}`))
              .join('')
          : '<div class="muted">evaluate an action to compare scenarios</div>'}
      </section>
    </div>`;
}

function wireEvents() {
  document.addEventListener('click', (e) => {
    const target = e.target as HTMLElement;
    if (target.id === 'load-btn') {
      const ta = document.querySelector<HTMLTextAreaElement>('#window-input');
      if (ta && ta.value.trim()) void loadWindow(ta.value.trim());
    }
    if (target.id === 'whatif-btn') void evaluateAction();
    if (target.id === 'nav-btn') void runNavigate();
    const rec = target.closest<HTMLElement>('.nav-rec');
    if (rec) pickRecommendation(Number(rec.dataset.index));
  });

  document.addEventListener('input', (e) => {
    const input = e.target as HTMLInputElement;
    if (input.matches('input[type=range][data-variable]')) {
      const spec = state.sliders.find((s) => s.variable === input.dataset.variable);
      if (spec) {
        spec.value = Number(input.value);
        const row = input.closest('.slider-row');
        const label = row?.querySelector<HTMLElement>('.delta');
        if (label) {
          label.dataset.value = String(spec.value);
          label.textContent = (spec.value > 0 ? '+' : '') + spec.value.toFixed(3);
        }
      }
    }
  });
}

void init();
