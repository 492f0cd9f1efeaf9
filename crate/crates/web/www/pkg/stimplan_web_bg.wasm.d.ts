/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_webplanner_free: (a: number, b: number) => void;
export const webplanner_contactLabels: (a: number) => [number, number, number, number];
export const webplanner_coverageCurve: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
export const webplanner_fieldSlice: (a: number, b: number, c: number) => [number, number, number, number];
export const webplanner_new: (a: number, b: number) => [number, number, number];
export const webplanner_sweep: (a: number, b: number, c: number) => [number, number, number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_malloc: (a: number, b: number) => number;
export const __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
export const __wbindgen_start: () => void;
