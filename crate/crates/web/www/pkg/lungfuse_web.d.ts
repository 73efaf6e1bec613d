/* tslint:disable */
/* eslint-disable */

/**
 * One synthetic patient: windowed CT with lesion mask, H&E bag and
 * metadata.
 */
export class Patient {
    free(): void;
    [Symbol.dispose](): void;
    ct_rgba(show_mask: boolean): Uint8Array;
    constructor(label: number, seed: number);
    stain_report(index: number): string;
    summary(): string;
    tile_rgba(index: number, normalized: boolean): Uint8Array;
    readonly class_name: string;
    readonly ct_size: number;
    readonly tile_count: number;
    readonly tile_size: number;
}

/**
 * Two correlated binary scorers on the same samples and their DeLong
 * comparison.
 */
export class RocComparison {
    free(): void;
    [Symbol.dispose](): void;
    curve_a(): Float64Array;
    curve_b(): Float64Array;
    constructor(n_pos: number, n_neg: number, shift_a: number, shift_b: number, rho: number, seed: number);
    readonly auc_a: number;
    readonly auc_b: number;
    readonly degenerate: boolean;
    readonly p_value: number;
    readonly z: number;
}

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_patient_free: (a: number, b: number) => void;
    readonly __wbg_roccomparison_free: (a: number, b: number) => void;
    readonly patient_class_name: (a: number) => [number, number];
    readonly patient_ct_rgba: (a: number, b: number) => [number, number];
    readonly patient_ct_size: (a: number) => number;
    readonly patient_new: (a: number, b: number) => [number, number, number];
    readonly patient_stain_report: (a: number, b: number) => [number, number, number, number];
    readonly patient_summary: (a: number) => [number, number];
    readonly patient_tile_count: (a: number) => number;
    readonly patient_tile_rgba: (a: number, b: number, c: number) => [number, number, number, number];
    readonly patient_tile_size: (a: number) => number;
    readonly roccomparison_auc_a: (a: number) => number;
    readonly roccomparison_auc_b: (a: number) => number;
    readonly roccomparison_curve_a: (a: number) => [number, number];
    readonly roccomparison_curve_b: (a: number) => [number, number];
    readonly roccomparison_degenerate: (a: number) => number;
    readonly roccomparison_new: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number, number];
    readonly roccomparison_p_value: (a: number) => number;
    readonly roccomparison_z: (a: number) => number;
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
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
