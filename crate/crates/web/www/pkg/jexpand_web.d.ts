/* tslint:disable */
/* eslint-disable */

export class JacobianView {
    private constructor();
    free(): void;
    [Symbol.dispose](): void;
    values(): Float32Array;
    /**
     * Voxels where the transform folds (J <= 0).
     */
    readonly folded: number;
    readonly max: number;
    readonly mean: number;
    readonly min: number;
}

export class Phantom {
    private constructor();
    free(): void;
    [Symbol.dispose](): void;
    /**
     * Slice intensities in HU.
     */
    image(): Float32Array;
    jmap(): Float32Array;
    readonly mean_j: number;
    readonly sd_j: number;
    readonly size: number;
}

export function affine_jacobian(size: number, a11: number, a12: number, a21: number, a22: number): JacobianView;

export function bump_jacobian(size: number, amp_row: number, amp_col: number, width: number): JacobianView;

export function make_phantom(size: number, severity: number, noise_sd: number, seed: number): Phantom;

/**
 * Flattened `[psnr, ssim, mae, spearman]` per noise level.
 */
export function noise_metrics(size: number, severity: number, levels: Float64Array, seed: number): Float64Array;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_jacobianview_free: (a: number, b: number) => void;
    readonly __wbg_phantom_free: (a: number, b: number) => void;
    readonly affine_jacobian: (a: number, b: number, c: number, d: number, e: number) => [number, number, number];
    readonly bump_jacobian: (a: number, b: number, c: number, d: number) => [number, number, number];
    readonly jacobianview_folded: (a: number) => number;
    readonly jacobianview_max: (a: number) => number;
    readonly jacobianview_mean: (a: number) => number;
    readonly jacobianview_min: (a: number) => number;
    readonly jacobianview_values: (a: number) => [number, number];
    readonly make_phantom: (a: number, b: number, c: number, d: number) => [number, number, number];
    readonly noise_metrics: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
    readonly phantom_image: (a: number) => [number, number];
    readonly phantom_jmap: (a: number) => [number, number];
    readonly phantom_mean_j: (a: number) => number;
    readonly phantom_sd_j: (a: number) => number;
    readonly phantom_size: (a: number) => number;
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __externref_table_dealloc: (a: number) => void;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
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
