/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_patient_free: (a: number, b: number) => void;
export const __wbg_roccomparison_free: (a: number, b: number) => void;
export const patient_class_name: (a: number) => [number, number];
export const patient_ct_rgba: (a: number, b: number) => [number, number];
export const patient_ct_size: (a: number) => number;
export const patient_new: (a: number, b: number) => [number, number, number];
export const patient_stain_report: (a: number, b: number) => [number, number, number, number];
export const patient_summary: (a: number) => [number, number];
export const patient_tile_count: (a: number) => number;
export const patient_tile_rgba: (a: number, b: number, c: number) => [number, number, number, number];
export const patient_tile_size: (a: number) => number;
export const roccomparison_auc_a: (a: number) => number;
export const roccomparison_auc_b: (a: number) => number;
export const roccomparison_curve_a: (a: number) => [number, number];
export const roccomparison_curve_b: (a: number) => [number, number];
export const roccomparison_degenerate: (a: number) => number;
export const roccomparison_new: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number, number];
export const roccomparison_p_value: (a: number) => number;
export const roccomparison_z: (a: number) => number;
export const __wbindgen_externrefs: WebAssembly.Table;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_start: () => void;
