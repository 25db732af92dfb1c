/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const coupling_metrics: (a: number, b: number, c: number) => [number, number];
export const plan: (a: number, b: number) => [number, number];
export const track: (a: number, b: number, c: number) => [number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_start: () => void;
