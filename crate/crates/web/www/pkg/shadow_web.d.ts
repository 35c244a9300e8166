/* tslint:disable */
/* eslint-disable */

/**
 * Configuration names and the default calibration, for populating the page.
 */
export function defaults(): string;

/**
 * Closed-form replay duration, capped at `cutoff`.
 */
export function predict_replay(rate: number, mu: number, t_accum: number, start_delay: number, cutoff: number): number;

/**
 * Runs one migration. `fault` names a phase to fail once ("" for none).
 */
export function simulate(config: string, rate: number, seed: bigint, cutoff: number, fault: string): string;

/**
 * One run per standard rate: simulated totals beside the replay prediction.
 */
export function sweep(config: string, seed: bigint, cutoff: number): string;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly defaults: () => [number, number];
    readonly predict_replay: (a: number, b: number, c: number, d: number, e: number) => number;
    readonly simulate: (a: number, b: number, c: number, d: bigint, e: number, f: number, g: number) => [number, number, number, number];
    readonly sweep: (a: number, b: number, c: bigint, d: number) => [number, number, number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
    readonly __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
    readonly __externref_table_dealloc: (a: number) => void;
    readonly __wbindgen_start: () => void;
}

export type SyncInitInput = BufferSource | WebAssembly.Module;

/**
 * Instantiates the given `module`, which can either be bytes or
 * a precompiled `WebAssembly.Module`.
 *
 * @param {{ module: SyncInitInput }} module - Passing `SyncInitInput` directly is deprecated.
 *
 * @returns {InitOutput}
 */
export function initSync(module: { module: SyncInitInput } | SyncInitInput): InitOutput;

/**
 * If `module_or_path` is {RequestInfo} or {URL}, makes a request and
 * for everything else, calls `WebAssembly.instantiate` directly.
 *
 * @param {{ module_or_path: InitInput | Promise<InitInput> }} module_or_path - Passing `InitInput` directly is deprecated.
 *
 * @returns {Promise<InitOutput>}
 */
export default function __wbg_init (module_or_path?: { module_or_path: InitInput | Promise<InitInput> } | InitInput | Promise<InitInput>): Promise<InitOutput>;
