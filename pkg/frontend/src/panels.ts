import type { NavigateResponse, Prediction, Scenario } from './types';
import { num, pct, signed } from './format';
import type { SliderSpec } from './controls';

const PHASE_COLORS: Record<string, string> = {
  drying: '#60a5fa',
  pyrolysis: '#f59e0b',
  combustion: '#ef4444',
  burnout: '#a78bfa'
};

const EXPERT_COLORS: Record<string, string> = {
  transformer: '#34d399',
  cnn: '#60a5fa',
  lstm: '#f472b6',
  mlp: '#fbbf24'
};

export function renderPollutantTable(pred: Prediction, targets: string[]): string {
  const rows = targets
    .map(
      (t) => `
      <tr>
        <td>${t}</td>
        <td class="right">${num(pred.pollutants[t], 2, `num pollutant-${t}`)}</td>
      </tr>`
    )
    .join('');
  return `
    <table class="pollutants">
      <thead><tr><th>Pollutant</th><th class="right">Predicted</th></tr></thead>
      <tbody>${rows}</tbody>
    </table>
    <div class="cpsi-line">CPSI ${num(pred.cpsi, 3, 'num cpsi')}</div>`;
}

// horizontal stacked bar; segment widths are the probabilities themselves
export function renderStackedBar(
  probs: Record<string, number>,
  order: string[],
  colors: Record<string, string>,
  kind: string
): string {
  const segments = order
    .map((k) => {
      const p = probs[k] ?? 0;
      return `<div class="seg seg-${kind}-${k}" data-value="${p}"
        style="width:${(100 * p).toFixed(3)}%;background:${colors[k] ?? '#94a3b8'}"
        title="${k} ${pct(p)}"></div>`;
    })
    .join('');
  const legend = order
    .map(
      (k) => `<span class="legend-item">
        <span class="dot" style="background:${colors[k] ?? '#94a3b8'}"></span>
        ${k} ${pct(probs[k] ?? 0)}</span>`
    )
    .join('');
  return `<div class="stacked-bar">${segments}</div><div class="legend">${legend}</div>`;
}

export function renderPhaseBar(pred: Prediction, phases: string[]): string {
  return renderStackedBar(pred.phase_probs, phases, PHASE_COLORS, 'phase');
}

export function renderGateBar(pred: Prediction, experts: string[]): string {
  return renderStackedBar(pred.gate_weights, experts, EXPERT_COLORS, 'gate');
}

export function renderScenarioCard(sc: Scenario, targets: string[], title: string): string {
  const actions = Object.entries(sc.action);
  const actionLine = actions.length
    ? actions.map(([k, v]) => `${k} ${signed(v)}`).join(', ')
    : 'no action';
  return `
    <div class="card scenario ${sc.feasible ? '' : 'infeasible'}">
      <div class="card-head">
        <span class="title">${title}</span>
        ${sc.feasible ? '' : '<span class="badge">out of bounds</span>'}
      </div>
      <div class="action-line">${actionLine}</div>
      ${renderPollutantTable(sc.predicted, targets)}
      <div class="score-line">
        score ${num(sc.score, 3, 'num score')}
        <span class="muted">(action ${num(sc.penalty.action, 3, 'num penalty-action')},
        physics ${num(sc.penalty.physics, 3, 'num penalty-physics')})</span>
      </div>
    </div>`;
}

export function renderNavigationList(nav: NavigateResponse): string {
  const items = nav.ranked
    .map((r, i) => {
      const label = Object.entries(r.action)
        .map(([k, v]) => `${k} ${signed(v)}`)
        .join(', ');
      return `
      <li class="nav-rec" data-index="${i}">
        <span class="rank">#${i + 1}</span>
        <span class="label">${label || 'hold steady'}</span>
        <span class="score">${num(r.score, 3, 'num rec-score')}</span>
      </li>`;
    })
    .join('');
  return `
    <div class="nav-summary">
      ${nav.n_candidates} candidates, baseline score ${num(nav.baseline.score, 3, 'num baseline-score')}
    </div>
    <ol class="nav-list">${items}</ol>`;
}

export function renderSliders(specs: SliderSpec[]): string {
  const groups = new Map<string, SliderSpec[]>();
  for (const s of specs) {
    const g = groups.get(s.module) ?? [];
    g.push(s);
    groups.set(s.module, g);
  }
  let html = '';
  for (const [mod, list] of groups) {
    html += `<div class="module-group"><h4>${mod.replace(/_/g, ' ')}</h4>`;
    for (const s of list) {
      html += `
        <div class="slider-row" data-variable="${s.variable}">
          <label>${s.variable}</label>
          <input type="range" min="${s.min}" max="${s.max}" step="${s.step}"
                 value="${s.value}" data-variable="${s.variable}">
          <span class="delta" data-value="${s.value}">${signed(s.value)}</span>
        </div>`;
    }
    html += '</div>';
  }
  return html;
}
