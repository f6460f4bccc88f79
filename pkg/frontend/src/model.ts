/** Reader for the engine's binary model files (little-endian). */

import { readFileSync } from "node:fs";

const MAGIC = "GLMMODEL";
const KINDS = ["dual_l2_logistic", "dual_l2_svm", "ridge_primal",
               "lasso_primal"] as const;

export interface ModelFile {
  kind: (typeof KINDS)[number];
  lambda: number;
  nExamples: number;
  nFeatures: number;
  alpha: Float64Array;
  v: Float64Array;
}

export function readModelFile(path: string): ModelFile {
  const buf = readFileSync(path);
  if (buf.subarray(0, 8).toString("latin1") !== MAGIC) {
    throw new Error(`${path}: not a model file`);
  }
  const version = buf.readUInt32LE(8);
  if (version !== 1) {
    throw new Error(`${path}: unsupported model version ${version}`);
  }
  const kind = KINDS[buf.readUInt32LE(12)];
  const lambda = buf.readDoubleLE(16);
  const nExamples = Number(buf.readBigUInt64LE(24));
  const nFeatures = Number(buf.readBigUInt64LE(32));
  const n = Number(buf.readBigUInt64LE(40));
  const d = Number(buf.readBigUInt64LE(48));
  const alpha = new Float64Array(n);
  const v = new Float64Array(d);
  let off = 56;
  for (let i = 0; i < n; i++, off += 8) {
    alpha[i] = buf.readDoubleLE(off);
  }
  for (let i = 0; i < d; i++, off += 8) {
    v[i] = buf.readDoubleLE(off);
  }
  return { kind, lambda, nExamples, nFeatures, alpha, v };
}
