/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_jacobianview_free: (a: number, b: number) => void;
export const __wbg_phantom_free: (a: number, b: number) => void;
export const affine_jacobian: (a: number, b: number, c: number, d: number, e: number) => [number, number, number];
export const bump_jacobian: (a: number, b: number, c: number, d: number) => [number, number, number];
export const jacobianview_folded: (a: number) => number;
export const jacobianview_max: (a: number) => number;
export const jacobianview_mean: (a: number) => number;
export const jacobianview_min: (a: number) => number;
export const jacobianview_values: (a: number) => [number, number];
export const make_phantom: (a: number, b: number, c: number, d: number) => [number, number, number];
export const noise_metrics: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
export const phantom_image: (a: number) => [number, number];
export const phantom_jmap: (a: number) => [number, number];
export const phantom_mean_j: (a: number) => number;
export const phantom_sd_j: (a: number) => number;
export const phantom_size: (a: number) => number;
export const __wbindgen_externrefs: WebAssembly.Table;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_malloc: (a: number, b: number) => number;
export const __wbindgen_start: () => void;
