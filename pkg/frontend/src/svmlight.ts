/** svmlight text serialization and parsing (1-based feature indices). */

/** Sparse row as sorted (0-based feature index, value) pairs. */
export type SparseRow = Array<[number, number]>;

export type FeatureMatrix = number[][] | SparseRow[];

export function isSparseRows(x: FeatureMatrix): x is SparseRow[] {
  return x.length > 0 && Array.isArray(x[0][0]);
}

/** Shortest round-trip decimal; parses back to the identical double. */
function fmt(x: number): string {
  if (!Number.isFinite(x)) {
    throw new Error(`non-finite value ${x} in features/labels`);
  }
  return String(x);
}

export function rowEntries(x: FeatureMatrix, i: number): SparseRow {
  if (isSparseRows(x)) {
    return x[i];
  }
  const dense = x[i] as number[];
  const out: SparseRow = [];
  for (let j = 0; j < dense.length; j++) {
    if (dense[j] !== 0) {
      out.push([j, dense[j]]);
    }
  }
  return out;
}

export function featureCount(x: FeatureMatrix): number {
  let max = 0;
  for (let i = 0; i < x.length; i++) {
    if (isSparseRows(x)) {
      for (const [j] of x[i] as SparseRow) {
        max = Math.max(max, j + 1);
      }
    } else {
      max = Math.max(max, (x[i] as number[]).length);
    }
  }
  return max;
}

/** Labels must be {-1,+1} or {0,1}; returned as +-1. */
export function normalizeLabels(y: number[]): number[] {
  const distinct = new Set(y);
  for (const v of distinct) {
    if (v !== -1 && v !== 0 && v !== 1) {
      throw new Error(`labels must be binary (+-1 or 0/1), got ${v}`);
    }
  }
  if (distinct.has(-1) && distinct.has(0)) {
    throw new Error("labels mix -1 and 0 conventions");
  }
  if (distinct.size > 2) {
    throw new Error(`expected binary labels, got ${distinct.size} classes`);
  }
  return y.map((v) => (v > 0 ? 1 : -1));
}

export function toSvmlight(x: FeatureMatrix, y: number[]): string {
  if (x.length !== y.length) {
    throw new Error(`X has ${x.length} rows but y has ${y.length} labels`);
  }
  const lines: string[] = [];
  for (let i = 0; i < x.length; i++) {
    const entries = rowEntries(x, i);
    let prev = -1;
    const parts = [fmt(y[i])];
    for (const [j, v] of entries) {
      if (j <= prev) {
        throw new Error(`row ${i}: feature indices must be strictly increasing`);
      }
      prev = j;
      parts.push(`${j + 1}:${fmt(v)}`);
    }
    lines.push(parts.join(" "));
  }
  return lines.join("\n") + "\n";
}

export function parseSvmlight(text: string): { rows: SparseRow[]; y: number[] } {
  const rows: SparseRow[] = [];
  const y: number[] = [];
  for (const raw of text.split("\n")) {
    const line = raw.trim();
    if (!line || line.startsWith("#")) {
      continue;
    }
    const parts = line.split(/\s+/);
    y.push(Number(parts[0]));
    const row: SparseRow = [];
    for (const tok of parts.slice(1)) {
      const colon = tok.indexOf(":");
      row.push([Number(tok.slice(0, colon)) - 1, Number(tok.slice(colon + 1))]);
    }
    rows.push(row);
  }
  return { rows, y };
}
