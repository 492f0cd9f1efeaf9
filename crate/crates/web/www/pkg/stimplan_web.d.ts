/* tslint:disable */
/* eslint-disable */

export class WebPlanner {
    free(): void;
    [Symbol.dispose](): void;
    contactLabels(): string;
    /**
     * `contacts` is comma-separated.
     */
    coverageCurve(contacts: string, lambda_max: number, steps: number): string;
    fieldSlice(request: string): string;
    /**
     * `spec` is a phantom spec as JSON; empty for defaults.
     */
    constructor(spec: string);
    sweep(gamma_grid: Float64Array): string;
}

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_webplanner_free: (a: number, b: number) => void;
    readonly webplanner_contactLabels: (a: number) => [number, number, number, number];
    readonly webplanner_coverageCurve: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
    readonly webplanner_fieldSlice: (a: number, b: number, c: number) => [number, number, number, number];
    readonly webplanner_new: (a: number, b: number) => [number, number, number];
    readonly webplanner_sweep: (a: number, b: number, c: number) => [number, number, number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __externref_table_dealloc: (a: number) => void;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
    readonly __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
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
