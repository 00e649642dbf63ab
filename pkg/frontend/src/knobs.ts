/**
 * Knob panel state and validation.
 *
 * The panel mirrors the service's edit-config rules, so nothing the UI can
 * construct is rejected server-side: enumerated knobs only offer the legal
 * values and the numeric/text rules are checked before any request leaves.
 */

import type { EditConfigPayload, LockInMode, PromptStyle } from "./types.js";

export const CAPTION_COUNTS = [1, 2, 4] as const;
export const SHOT_COUNTS = [0, 1, 3] as const;
export const PROMPT_STYLES: readonly PromptStyle[] = ["terse", "detailed"];
export const LOCK_IN_MODES: readonly LockInMode[] = [
  "none",
  "generated_caption",
  "user_caption",
];

export interface KnobState {
  nCaptions: number;
  shots: number;
  promptStyle: string;
  lockInMode: string;
  userCaption: string;
  ddimSteps: number;
  directionStrength: number;
  rngSeed: number;
  retryLimit: number;
}

export const DEFAULT_KNOBS: KnobState = {
  nCaptions: 1,
  shots: 0,
  promptStyle: "terse",
  lockInMode: "none",
  userCaption: "",
  ddimSteps: 100,
  directionStrength: 1.0,
  rngSeed: 0,
  retryLimit: 3,
};

/** Every violated rule, empty when the state maps to a valid config. */
export function validateKnobs(state: KnobState): string[] {
  const errors: string[] = [];
  if (!CAPTION_COUNTS.includes(state.nCaptions as 1 | 2 | 4)) {
    errors.push(`caption count must be one of ${CAPTION_COUNTS.join(", ")}`);
  }
  if (!SHOT_COUNTS.includes(state.shots as 0 | 1 | 3)) {
    errors.push(`shot count must be one of ${SHOT_COUNTS.join(", ")}`);
  }
  if (!PROMPT_STYLES.includes(state.promptStyle as PromptStyle)) {
    errors.push("prompt style must be terse or detailed");
  }
  if (!LOCK_IN_MODES.includes(state.lockInMode as LockInMode)) {
    errors.push("unknown lock-in mode");
  }
  if (state.lockInMode === "user_caption" && state.userCaption.trim() === "") {
    errors.push("user-caption lock-in needs a caption");
  }
  if (state.lockInMode !== "user_caption" && state.userCaption.trim() !== "") {
    errors.push("a user caption is only allowed with user-caption lock-in");
  }
  if (!Number.isInteger(state.ddimSteps) || state.ddimSteps < 1) {
    errors.push("diffusion steps must be a positive integer");
  }
  if (!Number.isFinite(state.directionStrength)) {
    errors.push("direction strength must be finite");
  }
  if (!Number.isInteger(state.rngSeed)) {
    errors.push("seed must be an integer");
  }
  if (!Number.isInteger(state.retryLimit) || state.retryLimit < 1) {
    errors.push("retry limit must be a positive integer");
  }
  return errors;
}

/** Wire payload for a valid state; throws on anything validateKnobs flags. */
export function toEditConfig(state: KnobState): EditConfigPayload {
  const errors = validateKnobs(state);
  if (errors.length > 0) {
    throw new Error(`invalid knobs: ${errors.join("; ")}`);
  }
  const payload: EditConfigPayload = {
    n_captions: state.nCaptions as 1 | 2 | 4,
    shots: state.shots as 0 | 1 | 3,
    prompt_style: state.promptStyle as PromptStyle,
    lock_in_mode: state.lockInMode as LockInMode,
    ddim_steps: state.ddimSteps,
    direction_strength: state.directionStrength,
    rng_seed: state.rngSeed,
    retry_limit: state.retryLimit,
  };
  if (state.lockInMode === "user_caption") {
    payload.user_caption = state.userCaption;
  }
  return payload;
}
