import { describe, expect, it } from 'vitest';

import meta from './fixtures/meta.json';
import predict from './fixtures/predict.json';
import whatifZero from './fixtures/whatif_zero.json';
import whatifAction from './fixtures/whatif_action.json';
import navigate from './fixtures/navigate.json';

import { currentAction, prefillFromRecommendation, sliderSpecs } from '../src/controls';
import {
  renderGateBar,
  renderNavigationList,
  renderPhaseBar,
  renderPollutantTable,
  renderScenarioCard,
  renderSliders
} from '../src/panels';
import type { Meta, NavigateResponse, Prediction, Scenario } from '../src/types';

const metaFx = meta as unknown as Meta;
const predictFx = predict as unknown as Prediction;
const whatifZeroFx = whatifZero as unknown as Scenario;
const whatifActionFx = whatifAction as unknown as Scenario;
const navigateFx = navigate as unknown as NavigateResponse;

// pull the exact value out of a rendered data-value attribute
function dataValues(html: string, cls: string): number[] {
  const re = new RegExp(`class="[^"]*\\b${cls}\\b[^"]*" data-value="([^"]+)"`, 'g');
  const out: number[] = [];
  for (const m of html.matchAll(re)) out.push(Number(m[1]));
  return out;
}

describe('pollutant table', () => {
  it('renders every pollutant with the exact fixture value', () => {
    const html = renderPollutantTable(predictFx, metaFx.targets);
    for (const t of metaFx.targets) {
      const vals = dataValues(html, `pollutant-${t}`);
      expect(vals).toEqual([predictFx.pollutants[t]]);
    }
  });

  it('renders the exact CPSI', () => {
    const html = renderPollutantTable(predictFx, metaFx.targets);
    expect(dataValues(html, 'cpsi')).toEqual([predictFx.cpsi]);
  });
});

describe('probability bars', () => {
  it('phase segments carry the exact fixture probabilities in order', () => {
    const html = renderPhaseBar(predictFx, metaFx.phases);
    for (const p of metaFx.phases) {
      const seg = dataValues(html.replace(/\n/g, ' '), `seg-phase-${p}`);
      expect(seg).toEqual([predictFx.phase_probs[p]]);
    }
  });

  it('gate segments carry the exact fixture weights and sum to one', () => {
    const html = renderGateBar(predictFx, metaFx.experts);
    let total = 0;
    for (const e of metaFx.experts) {
      const seg = dataValues(html.replace(/\n/g, ' '), `seg-gate-${e}`);
      expect(seg).toEqual([predictFx.gate_weights[e]]);
      total += seg[0];
    }
    expect(total).toBeCloseTo(1, 5);
  });
});

describe('sliders', () => {
  it('bounds equal /meta bounds exactly for every module variable', () => {
    const specs = sliderSpecs(metaFx);
    const expected = metaFx.modules.flatMap((m) => m.variables);
    expect(specs.map((s) => s.variable)).toEqual(expected);
    for (const s of specs) {
      expect(s.min).toBe(-metaFx.bounds[s.variable]);
      expect(s.max).toBe(metaFx.bounds[s.variable]);
      expect(s.value).toBe(0);
    }
  });

  it('module filter keeps only that module\'s variables', () => {
    const specs = sliderSpecs(metaFx, ['o2_pressure']);
    const mod = metaFx.modules.find((m) => m.name === 'o2_pressure')!;
    expect(specs.map((s) => s.variable)).toEqual(mod.variables);
  });

  it('rendered slider min/max/value match the specs', () => {
    const specs = sliderSpecs(metaFx);
    const html = renderSliders(specs);
    for (const s of specs) {
      expect(html).toContain(`min="${s.min}" max="${s.max}"`);
      expect(html).toContain(`data-variable="${s.variable}"`);
    }
  });
});

describe('recommendation pre-fill', () => {
  it('selecting a recommendation copies its exact deltas onto the sliders', () => {
    const specs = sliderSpecs(metaFx);
    const rec = navigateFx.ranked.find((r) => Object.keys(r.action).length > 0)!;
    const filled = prefillFromRecommendation(specs, rec.action);
    for (const s of filled) {
      expect(s.value).toBe(rec.action[s.variable] ?? 0);
    }
    // round-trip: the action rebuilt from the sliders is the recommendation
    expect(currentAction(filled)).toEqual(rec.action);
  });

  it('pre-filling resets previously moved sliders not in the action', () => {
    let specs = sliderSpecs(metaFx);
    specs = specs.map((s) => ({ ...s, value: s.max / 2 }));
    const rec = navigateFx.ranked[0];
    const filled = prefillFromRecommendation(specs, rec.action);
    for (const s of filled) {
      if (!(s.variable in rec.action)) expect(s.value).toBe(0);
    }
  });
});

describe('scenario cards', () => {
  it('zero-action what-if prediction equals the predict fixture', () => {
    expect(whatifZeroFx.predicted).toEqual(predictFx);
    expect(whatifZeroFx.penalty.action).toBe(0);
  });

  it('card shows exact score and penalties', () => {
    const html = renderScenarioCard(whatifActionFx, metaFx.targets, 'scenario 1');
    expect(dataValues(html, 'score')).toEqual([whatifActionFx.score]);
    expect(dataValues(html, 'penalty-action')).toEqual([whatifActionFx.penalty.action]);
    expect(dataValues(html, 'penalty-physics')).toEqual([whatifActionFx.penalty.physics]);
    for (const t of metaFx.targets) {
      expect(dataValues(html, `pollutant-${t}`)).toEqual([whatifActionFx.predicted.pollutants[t]]);
    }
  });

  it('flags infeasible scenarios', () => {
    const bad = { ...whatifActionFx, feasible: false };
    expect(renderScenarioCard(bad, metaFx.targets, 'x')).toContain('infeasible');
  });
});

describe('navigation list', () => {
  it('renders every ranked score exactly and in fixture order', () => {
    const html = renderNavigationList(navigateFx);
    expect(dataValues(html, 'rec-score')).toEqual(navigateFx.ranked.map((r) => r.score));
    expect(dataValues(html, 'baseline-score')).toEqual([navigateFx.baseline.score]);
  });

  it('top recommendation never scores above the baseline', () => {
    expect(navigateFx.ranked[0].score).toBeLessThanOrEqual(navigateFx.baseline.score);
  });
});
