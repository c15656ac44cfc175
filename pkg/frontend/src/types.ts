export interface ModuleDef {
  name: string;
  variables: string[];
  n_steps: number;
}

export interface Meta {
  window_length: number;
  features: string[];
  targets: string[];
  phases: string[];
  experts: string[];
  modules: ModuleDef[];
  bounds: Record<string, number>;
  cpsi: { weights: Record<string, number>; limits: Record<string, number>; scale: number };
}

export interface Prediction {
  pollutants: Record<string, number>;
  cpsi: number;
  phase_probs: Record<string, number>;
  gate_weights: Record<string, number>;
}

export interface Scenario {
  action: Record<string, number>;
  feasible: boolean;
  predicted: Prediction;
  penalty: { action: number; physics: number };
  score: number;
}

export interface NavigateResponse {
  baseline: Scenario;
  ranked: (Scenario & { candidate_index: number })[];
  n_candidates: number;
}

export interface ApiError {
  code: string;
  message: string;
}
