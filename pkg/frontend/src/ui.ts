/**
 * DOM rendering: knob panel, comparison strip with overlay slider, history
 * list, directions inspector, error banner.
 */

import { base64ToDataUrl } from "./api.js";
import {
  CAPTION_COUNTS,
  LOCK_IN_MODES,
  PROMPT_STYLES,
  SHOT_COUNTS,
  validateKnobs,
} from "./knobs.js";
import type { KnobState } from "./knobs.js";
import type { HistoryEntry, SessionState } from "./session.js";
import type { BundleView } from "./types.js";

function option(value: string, label?: string): HTMLOptionElement {
  const el = document.createElement("option");
  el.value = value;
  el.textContent = label ?? value;
  return el;
}

function labeled(text: string, control: HTMLElement): HTMLLabelElement {
  const label = document.createElement("label");
  label.className = "knob";
  const span = document.createElement("span");
  span.textContent = text;
  label.append(span, control);
  return label;
}

/**
 * Build the knob panel. Enumerated knobs are selects over the legal values
 * only, so the panel cannot express an invalid combination beyond the
 * user-caption text rule, which is surfaced inline and blocks submission.
 */
export function buildKnobPanel(
  container: HTMLElement,
  state: KnobState,
  onChange: (state: KnobState) => void,
): void {
  container.textContent = "";
  container.classList.add("knob-panel");

  const emit = () => {
    errors.textContent = validateKnobs(state).join("; ");
    onChange(state);
  };

  const captions = document.createElement("select");
  captions.dataset.knob = "n_captions";
  for (const n of CAPTION_COUNTS) captions.append(option(String(n)));
  captions.value = String(state.nCaptions);
  captions.addEventListener("change", () => {
    state.nCaptions = Number(captions.value);
    emit();
  });

  const shots = document.createElement("select");
  shots.dataset.knob = "shots";
  for (const k of SHOT_COUNTS) shots.append(option(String(k)));
  shots.value = String(state.shots);
  shots.addEventListener("change", () => {
    state.shots = Number(shots.value);
    emit();
  });

  const style = document.createElement("select");
  style.dataset.knob = "prompt_style";
  for (const s of PROMPT_STYLES) style.append(option(s));
  style.value = state.promptStyle;
  style.addEventListener("change", () => {
    state.promptStyle = style.value;
    emit();
  });

  const lockIn = document.createElement("select");
  lockIn.dataset.knob = "lock_in_mode";
  for (const mode of LOCK_IN_MODES) lockIn.append(option(mode));
  lockIn.value = state.lockInMode;

  const userCaption = document.createElement("input");
  userCaption.type = "text";
  userCaption.dataset.knob = "user_caption";
  userCaption.placeholder = "caption of the source image";
  userCaption.value = state.userCaption;
  userCaption.disabled = state.lockInMode !== "user_caption";
  userCaption.addEventListener("input", () => {
    state.userCaption = userCaption.value;
    emit();
  });
  lockIn.addEventListener("change", () => {
    state.lockInMode = lockIn.value;
    userCaption.disabled = state.lockInMode !== "user_caption";
    if (userCaption.disabled) {
      userCaption.value = "";
      state.userCaption = "";
    }
    emit();
  });

  const integerInput = (
    knob: string,
    value: number,
    min: number,
    apply: (v: number) => void,
  ): HTMLInputElement => {
    const input = document.createElement("input");
    input.type = "number";
    input.dataset.knob = knob;
    input.min = String(min);
    input.step = "1";
    input.value = String(value);
    input.addEventListener("input", () => {
      const parsed = Number(input.value);
      apply(Number.isFinite(parsed) ? Math.max(min, Math.round(parsed)) : min);
      emit();
    });
    return input;
  };

  const steps = integerInput("ddim_steps", state.ddimSteps, 1, (v) => (state.ddimSteps = v));
  const seed = integerInput("rng_seed", state.rngSeed, -(2 ** 31), (v) => (state.rngSeed = v));
  const retries = integerInput("retry_limit", state.retryLimit, 1, (v) => (state.retryLimit = v));

  const strength = document.createElement("input");
  strength.type = "number";
  strength.dataset.knob = "direction_strength";
  strength.step = "0.1";
  strength.value = String(state.directionStrength);
  strength.addEventListener("input", () => {
    const v = Number(strength.value);
    state.directionStrength = Number.isFinite(v) ? v : 1.0;
    emit();
  });

  const errors = document.createElement("p");
  errors.className = "knob-errors";

  container.append(
    labeled("captions per side", captions),
    labeled("few-shot examples", shots),
    labeled("prompt style", style),
    labeled("lock-in", lockIn),
    labeled("user caption", userCaption),
    labeled("diffusion steps", steps),
    labeled("direction strength", strength),
    labeled("seed", seed),
    labeled("retry limit", retries),
    errors,
  );
}

function stripPanel(title: string, src: string | null): HTMLElement {
  const panel = document.createElement("figure");
  panel.className = "strip-panel";
  const caption = document.createElement("figcaption");
  caption.textContent = title;
  panel.append(caption);
  if (src !== null) {
    const img = document.createElement("img");
    img.src = src;
    img.alt = title;
    panel.append(img);
  }
  return panel;
}

/** Side-by-side strip: source / reconstruction / edited, plus overlay slider. */
export function renderStrip(container: HTMLElement, entry: HistoryEntry): void {
  container.textContent = "";
  container.classList.add("strip");

  const row = document.createElement("div");
  row.className = "strip-row";
  row.append(
    stripPanel("source", entry.sourcePreview),
    stripPanel("reconstruction", base64ToDataUrl(entry.reconstruction)),
    stripPanel("edited", base64ToDataUrl(entry.editedImage)),
  );

  // before/after overlay: the edited layer is clipped at the slider position
  const overlay = document.createElement("div");
  overlay.className = "overlay";
  const under = document.createElement("img");
  under.src = base64ToDataUrl(entry.reconstruction);
  under.alt = "before";
  const over = document.createElement("img");
  over.src = base64ToDataUrl(entry.editedImage);
  over.alt = "after";
  over.className = "overlay-top";
  over.style.clipPath = "inset(0 50% 0 0)";
  const slider = document.createElement("input");
  slider.type = "range";
  slider.min = "0";
  slider.max = "100";
  slider.value = "50";
  slider.className = "overlay-slider";
  slider.addEventListener("input", () => {
    over.style.clipPath = `inset(0 ${100 - Number(slider.value)}% 0 0)`;
  });
  overlay.append(under, over, slider);

  const caption = document.createElement("p");
  caption.className = "strip-caption";
  caption.textContent = `caption used: ${entry.captionUsed}`;

  container.append(row, overlay, caption);
}

/** Before/after caption lists with the lock-in caption badged. */
export function renderDirections(container: HTMLElement, bundle: BundleView): void {
  container.textContent = "";
  container.classList.add("directions");
  for (const [title, captions] of [
    ["before", bundle.before],
    ["after", bundle.after],
  ] as const) {
    const section = document.createElement("section");
    const heading = document.createElement("h3");
    heading.textContent = `${title} transformation`;
    section.append(heading);
    const list = document.createElement("ul");
    captions.forEach((text, index) => {
      const item = document.createElement("li");
      item.className = "caption-row";
      item.textContent = text;
      if (
        title === "before" &&
        index === 0 &&
        bundle.locked_first_before !== null &&
        bundle.lock_source !== "none"
      ) {
        const badge = document.createElement("span");
        badge.className = "lock-badge";
        badge.textContent = `locked (${bundle.lock_source})`;
        item.append(" ", badge);
      }
      list.append(item);
    });
    section.append(list);
    container.append(section);
  }
}

export function renderHistory(
  container: HTMLElement,
  state: SessionState,
  onSelect: (id: number) => void,
  onPromote: (id: number) => void,
): void {
  container.textContent = "";
  container.classList.add("history");
  for (const entry of state.history) {
    const row = document.createElement("div");
    row.className = entry.id === state.selectedEntry ? "history-row selected" : "history-row";
    row.dataset.entryId = String(entry.id);

    const thumb = document.createElement("img");
    thumb.src = base64ToDataUrl(entry.editedImage);
    thumb.alt = `edit #${entry.id}`;
    thumb.className = "history-thumb";

    const text = document.createElement("span");
    text.textContent = `#${entry.id} ${entry.instruction}`;

    const promote = document.createElement("button");
    promote.textContent = "use as source";
    promote.className = "promote";
    promote.addEventListener("click", (event) => {
      event.stopPropagation();
      onPromote(entry.id);
    });

    const download = document.createElement("a");
    download.textContent = "provenance";
    download.className = "provenance-link";
    download.href =
      "data:application/json;charset=utf-8," +
      encodeURIComponent(JSON.stringify(entry.provenance, null, 2));
    download.setAttribute("download", `edit-${entry.id}.provenance.json`);

    row.addEventListener("click", () => onSelect(entry.id));
    row.append(thumb, text, promote, download);
    container.append(row);
  }
}

export function renderBanner(container: HTMLElement, banner: string | null): void {
  container.textContent = banner ?? "";
  container.classList.toggle("banner-visible", banner !== null);
}
