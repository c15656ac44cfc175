// Every numeric shown in the UI goes through these helpers, and each
// rendered element also carries the untruncated value in data-value so
// the contract tests (and debugging) can check exact equality.

export function fmt(x: number, digits = 2): string {
  if (!Number.isFinite(x)) return String(x);
  const a = Math.abs(x);
  if (a !== 0 && (a >= 1e6 || a < 1e-3)) return x.toExponential(digits);
  return x.toFixed(digits);
}

export function pct(x: number): string {
  return `${(100 * x).toFixed(1)}%`;
}

export function signed(x: number, digits = 3): string {
  const s = fmt(x, digits);
  return x > 0 ? `+${s}` : s;
}

export function num(x: number, digits = 2, cls = 'num'): string {
  return `<span class="${cls}" data-value="${x}">${fmt(x, digits)}</span>`;
}
