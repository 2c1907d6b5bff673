/* tslint:disable */
/* eslint-disable */

/**
 * Attention weights of query position `query` over the 16×16 downsampled
 * grid, from a Non-Local block initialized with `seed` applied to the CSI image.
 */
export function attention_row(range: number, angle: number, relative_angle: number, seed: number, query: number): Float32Array;

/**
 * Real-part plane of one normalized 32×32 CSI image (1024-antenna BS, single user).
 */
export function csi_real_plane(range: number, angle: number, relative_angle: number): Float32Array;

/**
 * Normalized gain `|hᴴa|² / (‖h‖²‖a‖²)` of a matched filter `a` focused at
 * `(focus_range, focus_angle)`, sampled on `rows` log-spaced ranges in
 * `[r_min, r_max]` by `cols` angles in `[-span, span]`.
 */
export function focusing_field(n_bs: number, wavelength: number, focus_range: number, focus_angle: number, r_min: number, r_max: number, span: number, rows: number, cols: number): Float32Array;

/**
 * Smallest range the channel model accepts, `(N1 + 1)·d`.
 */
export function min_range(n_bs: number, wavelength: number): number;

/**
 * Near-field boundary `2D²/λ` of a half-wavelength ULA with `n_bs` antennas.
 */
export function rayleigh_distance(n_bs: number, wavelength: number): number;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly attention_row: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
    readonly csi_real_plane: (a: number, b: number, c: number) => [number, number, number, number];
    readonly focusing_field: (a: number, b: number, c: number, d: number, e: number, f: number, g: number, h: number, i: number) => [number, number, number, number];
    readonly min_range: (a: number, b: number) => number;
    readonly rayleigh_distance: (a: number, b: number) => [number, number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __externref_table_dealloc: (a: number) => void;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
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
