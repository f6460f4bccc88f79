/**
 * Estimator-style wrapper over the training engine.
 *
 * All numerical work happens in the engine process; this class only
 * serializes data to svmlight, drives the CLI and parses its artifacts.
 * Single-node operation (the local API): devices, inner rounds and solver
 * threads remain configurable.
 */

import { mkdtempSync, readFileSync, rmSync, writeFileSync } from "node:fs";
import { tmpdir } from "node:os";
import { join } from "node:path";

import { readModelFile, type ModelFile } from "./model.js";
import { runCli } from "./runner.js";
import {
  featureCount, normalizeLabels, toSvmlight, type FeatureMatrix,
} from "./svmlight.js";

export interface EstimatorParams {
  objective: "dual-logistic" | "dual-svm";
  lambda: number;
  devices: number;
  t2: number;
  epochs: number;
  threads: number;
  seed: number;
  maxRounds: number;
  targetGap?: number;
}

const DEFAULTS: EstimatorParams = {
  objective: "dual-logistic",
  lambda: 1.0,
  devices: 1,
  t2: 1,
  epochs: 2,
  threads: 1,
  seed: 0,
  maxRounds: 20,
};

export interface TraceRow {
  round: number;
  wallS: number;
  simCost: number;
  objective: number;
  gap: number | null;
}

export class GlmEstimator {
  private params: EstimatorParams;
  private workDir: string | null = null;
  private modelPath: string | null = null;
  private model: ModelFile | null = null;
  private nFeaturesFitted = 0;

  /** Convergence trace of the last fit. */
  public trace: TraceRow[] = [];

  constructor(params: Partial<EstimatorParams> = {}) {
    this.params = { ...DEFAULTS, ...params };
  }

  getParams(): EstimatorParams {
    return { ...this.params };
  }

  setParams(params: Partial<EstimatorParams>): this {
    this.params = { ...this.params, ...params };
    return this;
  }

  get fitted(): boolean {
    return this.model !== null;
  }

  /** Feature weights w of the fitted classifier (w = v / lambda). */
  coefficients(): Float64Array {
    const model = this.requireModel();
    const w = new Float64Array(model.v.length);
    for (let i = 0; i < w.length; i++) {
      w[i] = model.v[i] / model.lambda;
    }
    return w;
  }

  fit(x: FeatureMatrix, y: number[]): this {
    if (x.length === 0) {
      throw new Error("cannot fit on an empty dataset");
    }
    const labels = normalizeLabels(y); // throws on non-binary targets
    this.disposeWorkDir();
    this.workDir = mkdtempSync(join(tmpdir(), "hierglm-est-"));
    const trainPath = join(this.workDir, "train.svm");
    writeFileSync(trainPath, toSvmlight(x, labels));
    this.modelPath = join(this.workDir, "model.bin");
    const tracePath = join(this.workDir, "trace.csv");
    const p = this.params;
    const args = [
      "train", "--data", trainPath, "--objective", p.objective,
      "--lambda", String(p.lambda), "--nodes", "1",
      "--devices", String(p.devices), "--t2", String(p.t2),
      "--epochs", String(p.epochs),
      "--threads-per-device", String(p.threads), "--seed", String(p.seed),
      "--max-rounds", String(p.maxRounds),
      "--model-out", this.modelPath, "--trace-out", tracePath,
    ];
    if (p.targetGap !== undefined) {
      args.push("--target-gap", String(p.targetGap));
    }
    runCli(args);
    this.model = readModelFile(this.modelPath);
    this.nFeaturesFitted = this.model.nFeatures;
    this.trace = parseTrace(readFileSync(tracePath, "utf8"));
    return this;
  }

  /** Class probabilities P(y = +1 | x). */
  predictProba(x: FeatureMatrix): number[] {
    const model = this.requireModel();
    const nFeat = featureCount(x);
    if (nFeat > this.nFeaturesFitted) {
      throw new Error(
        `test data has ${nFeat} features, model was fitted with ` +
        `${this.nFeaturesFitted}`);
    }
    const testPath = join(this.workDir!, "test.svm");
    // labels are irrelevant for scoring; serialize a placeholder
    writeFileSync(testPath, toSvmlight(x, new Array(x.length).fill(1)));
    const scoresPath = join(this.workDir!, "scores.csv");
    runCli(["predict", "--model", this.modelPath!, "--data", testPath,
            "--scores-out", scoresPath]);
    const lines = readFileSync(scoresPath, "utf8").trim().split("\n");
    return lines.slice(1).map((line) => Number(line.split(",")[1]));
  }

  /** Predicted labels in {-1, +1}; +1 iff P(y=+1|x) >= 0.5. */
  predict(x: FeatureMatrix): number[] {
    return this.predictProba(x).map((p) => (p >= 0.5 ? 1 : -1));
  }

  dispose(): void {
    this.disposeWorkDir();
    this.model = null;
    this.modelPath = null;
  }

  private requireModel(): ModelFile {
    if (this.model === null) {
      throw new Error("estimator is not fitted; call fit() first");
    }
    return this.model;
  }

  private disposeWorkDir(): void {
    if (this.workDir !== null) {
      rmSync(this.workDir, { recursive: true, force: true });
      this.workDir = null;
    }
  }
}

function parseTrace(text: string): TraceRow[] {
  const lines = text.trim().split("\n");
  return lines.slice(1).map((line) => {
    const [round, wallS, simCost, objective, gap] = line.split(",");
    return {
      round: Number(round),
      wallS: Number(wallS),
      simCost: Number(simCost),
      objective: Number(objective),
      gap: gap === "" ? null : Number(gap),
    };
  });
}
