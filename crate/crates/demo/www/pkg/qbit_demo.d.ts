/* tslint:disable */
/* eslint-disable */

/**
 * Names of the bundled architectures, comma separated.
 */
export function architectures(): string;

/**
 * Samples a quantizer transfer curve as interleaved `x, y` pairs.
 *
 * `role` is `activation` (input range [-0.5, 1.5]) or `weight`
 * (input range [-3, 3], one channel, so the max is taken over the range).
 */
export function quantizer_curve(role: string, bits: number, samples: number): Float64Array;

/**
 * Size report table for a bundled architecture.
 *
 * An empty `notation` plans the schedule from `k_start` down to 1 bit.
 */
export function size_table(arch: string, notation: string, k_start: number, baseline: number, k_a: number): string;

/**
 * Binarizes two vectors, packs them and walks through the XNOR-popcount dot.
 */
export function xnor_dot(w: string, a: string): string;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly architectures: () => [number, number];
    readonly quantizer_curve: (a: number, b: number, c: number, d: number) => [number, number, number, number];
    readonly size_table: (a: number, b: number, c: number, d: number, e: number, f: number, g: number) => [number, number, number, number];
    readonly xnor_dot: (a: number, b: number, c: number, d: number) => [number, number, number, number];
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
