import type { Meta, NavigateResponse, Prediction, Scenario } from './types';

// the console is served from /ui on the same origin as the API
const API_BASE = '';

async function request<T>(path: string, init?: RequestInit): Promise<T> {
  const res = await fetch(`${API_BASE}${path}`, init);
  const body = await res.json();
  if (!res.ok) {
    const msg = body && body.message ? `${body.code}: ${body.message}` : `HTTP ${res.status}`;
    throw new Error(msg);
  }
  return body as T;
}

function post<T>(path: string, payload: unknown): Promise<T> {
  return request<T>(path, {
    method: 'POST',
    headers: { 'Content-Type': 'application/json' },
    body: JSON.stringify(payload)
  });
}

export function getHealth(): Promise<{ status: string; model: string | null }> {
  return request('/health');
}

export function getMeta(): Promise<Meta> {
  return request('/meta');
}

export function postPredict(window: number[][]): Promise<Prediction> {
  return post('/predict', { window });
}

export function postWhatif(window: number[][], action: Record<string, number>): Promise<Scenario> {
  return post('/whatif', { window, action });
}

export function postNavigate(
  window: number[][],
  modules: string[] | null,
  topN: number
): Promise<NavigateResponse> {
  const payload: Record<string, unknown> = { window, top_n: topN };
  if (modules) payload.modules = modules;
  return post('/navigate', payload);
}
