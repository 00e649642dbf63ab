/** Wire types mirroring the editing service's JSON schemas. */

export type PromptStyle = "terse" | "detailed";
export type LockInMode = "none" | "generated_caption" | "user_caption";

/** Knob payload accepted by POST /edit and POST /directions (snake_case on the wire). */
export interface EditConfigPayload {
  n_captions: 1 | 2 | 4;
  shots: 0 | 1 | 3;
  prompt_style: PromptStyle;
  lock_in_mode: LockInMode;
  user_caption?: string;
  ddim_steps: number;
  direction_strength: number;
  rng_seed: number;
  retry_limit: number;
}

export interface BundleView {
  before: string[];
  after: string[];
  locked_first_before: string | null;
  lock_source: string;
}

export interface DirectionStats {
  shape: number[];
  l2_norm: number;
  max_abs: number;
  mean: number;
}

export interface EditResponse {
  edited_image: string; // base64 PNG
  reconstruction: string; // base64 PNG
  caption_used: string;
  bundle: BundleView;
  direction: DirectionStats;
  provenance: Record<string, unknown>;
}

export interface DirectionsResponse {
  bundle: BundleView;
  direction: DirectionStats;
  completion: string;
}

export interface HealthResponse {
  status: string;
  version: string;
  backends: Record<string, string>;
}
