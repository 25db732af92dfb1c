/* tslint:disable */
/* eslint-disable */

/**
 * Coupling spectrum and normalized entropy of the reference arm at joint angles in degrees.
 */
export function coupling_metrics(q1_deg: number, q2_deg: number, q3_deg: number): string;

/**
 * Plans from the reference start towards `(goal_x, goal_y, 0)`.
 */
export function plan(goal_x: number, goal_y: number): string;

/**
 * Plans towards the goal, then tracks the plan from an initial joint error in degrees.
 * Rows are thinned to every 20th control step.
 */
export function track(goal_x: number, goal_y: number, initial_error_deg: number): string;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly coupling_metrics: (a: number, b: number, c: number) => [number, number];
    readonly plan: (a: number, b: number) => [number, number];
    readonly track: (a: number, b: number, c: number) => [number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
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
