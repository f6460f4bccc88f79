export { GlmEstimator, type EstimatorParams, type TraceRow } from "./estimator.js";
export { readModelFile, type ModelFile } from "./model.js";
export { parseSvmlight, toSvmlight, type FeatureMatrix, type SparseRow } from "./svmlight.js";
export { CliError, runCli } from "./runner.js";
