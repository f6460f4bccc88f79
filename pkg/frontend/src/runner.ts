/** Process boundary to the training engine: every call goes through its CLI. */

import { spawnSync } from "node:child_process";

export interface CliResult {
  stdout: string;
  stderr: string;
}

/** Interpreter running the engine; override with HIERGLM_PYTHON. */
export function pythonInterpreter(): string {
  return process.env.HIERGLM_PYTHON ?? "python3";
}

export class CliError extends Error {
  constructor(message: string, public readonly exitCode: number,
              public readonly stderr: string) {
    super(message);
    this.name = "CliError";
  }
}

export function runCli(args: string[], timeoutMs = 600_000): CliResult {
  const proc = spawnSync(pythonInterpreter(), ["-m", "hierglm.cli", ...args], {
    encoding: "utf8",
    timeout: timeoutMs,
    maxBuffer: 64 * 1024 * 1024,
  });
  if (proc.error) {
    throw new CliError(`failed to launch engine CLI: ${proc.error.message}`,
                       -1, "");
  }
  if (proc.status !== 0) {
    throw new CliError(
      `engine CLI exited with code ${proc.status}: ${proc.stderr.trim()}`,
      proc.status ?? -1, proc.stderr);
  }
  return { stdout: proc.stdout, stderr: proc.stderr };
}
