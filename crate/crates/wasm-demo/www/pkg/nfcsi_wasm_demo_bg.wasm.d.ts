/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const attention_row: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
export const csi_real_plane: (a: number, b: number, c: number) => [number, number, number, number];
export const focusing_field: (a: number, b: number, c: number, d: number, e: number, f: number, g: number, h: number, i: number) => [number, number, number, number];
export const min_range: (a: number, b: number) => number;
export const rayleigh_distance: (a: number, b: number) => [number, number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_start: () => void;
