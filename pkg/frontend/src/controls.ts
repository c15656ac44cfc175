import type { Meta, ModuleDef } from './types';

export interface SliderSpec {
  variable: string;
  module: string;
  min: number;
  max: number;
  step: number;
  value: number;
}

// one slider per controllable variable, bounded exactly by the per-variable
// action bound the server reports in /meta
export function sliderSpecs(meta: Meta, moduleNames?: string[]): SliderSpec[] {
  const specs: SliderSpec[] = [];
  const selected: ModuleDef[] = meta.modules.filter(
    (m) => !moduleNames || moduleNames.includes(m.name)
  );
  for (const mod of selected) {
    for (const variable of mod.variables) {
      const bound = meta.bounds[variable];
      if (bound === undefined) continue;
      specs.push({
        variable,
        module: mod.name,
        min: -bound,
        max: bound,
        step: bound > 0 ? (2 * bound) / 100 : 1,
        value: 0
      });
    }
  }
  return specs;
}

// selecting a recommendation pre-fills the sliders with its exact deltas
// and resets every untouched variable to zero
export function prefillFromRecommendation(
  specs: SliderSpec[],
  action: Record<string, number>
): SliderSpec[] {
  return specs.map((s) => ({ ...s, value: action[s.variable] ?? 0 }));
}

export function currentAction(specs: SliderSpec[]): Record<string, number> {
  const action: Record<string, number> = {};
  for (const s of specs) {
    if (s.value !== 0) action[s.variable] = s.value;
  }
  return action;
}

export function clamp(spec: SliderSpec, value: number): number {
  return Math.min(spec.max, Math.max(spec.min, value));
}
