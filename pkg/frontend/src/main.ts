/** Application bootstrap: wires the session to the page. */

import { createClient } from "./api.js";
import { DirectionsInspector } from "./inspector.js";
import { DEFAULT_KNOBS } from "./knobs.js";
import type { KnobState } from "./knobs.js";
import { Session } from "./session.js";
import {
  buildKnobPanel,
  renderBanner,
  renderDirections,
  renderHistory,
  renderStrip,
} from "./ui.js";

function must(id: string): HTMLElement {
  const el = document.getElementById(id);
  if (el === null) {
    throw new Error(`missing element #${id}`);
  }
  return el;
}

export function bootstrap(serviceUrl = ""): Session {
  const session = new Session(createClient(serviceUrl));
  const knobs: KnobState = { ...DEFAULT_KNOBS };

  const upload = must("upload") as HTMLInputElement;
  const instruction = must("instruction") as HTMLInputElement;
  const submit = must("submit") as HTMLButtonElement;
  const inspect = must("inspect") as HTMLButtonElement;
  const knobPanel = must("knob-panel");
  const banner = must("banner");
  const strip = must("strip");
  const history = must("history");
  const directions = must("directions");
  const sourcePreview = must("source-preview") as HTMLImageElement;

  const inspector = new DirectionsInspector(session, (bundle) =>
    renderDirections(directions, bundle),
  );

  buildKnobPanel(knobPanel, knobs, () => {
    submit.disabled = session.state.pending || session.canSubmit(instruction.value, knobs).length > 0;
    void inspector.onKnobsChanged(knobs);
  });

  upload.addEventListener("change", () => {
    const file = upload.files?.[0];
    if (file === undefined) {
      return;
    }
    const reader = new FileReader();
    reader.onload = () => {
      session.setSource(file, file.name, reader.result as string);
    };
    reader.readAsDataURL(file);
  });

  submit.addEventListener("click", () => {
    void session.submitEdit(instruction.value, knobs);
  });

  inspect.addEventListener("click", () => {
    void inspector.inspect(instruction.value, knobs);
  });

  session.subscribe((state) => {
    renderBanner(banner, state.banner);
    // one in-flight edit per session: lock the controls while pending
    submit.disabled = state.pending || session.canSubmit(instruction.value, knobs).length > 0;
    inspect.disabled = state.pending;
    knobPanel.querySelectorAll("select, input").forEach((el) => {
      (el as HTMLInputElement).disabled = state.pending;
    });
    if (state.sourcePreview !== null) {
      sourcePreview.src = state.sourcePreview;
    }
    renderHistory(
      history,
      state,
      (id) => {
        const entry = session.selectEntry(id);
        if (entry !== undefined) {
          renderStrip(strip, entry); // re-displayed from memory, no service call
        }
      },
      (id) => session.promoteToSource(id),
    );
    const selected = state.selectedEntry !== null ? session.getEntry(state.selectedEntry) : undefined;
    if (selected !== undefined) {
      renderStrip(strip, selected);
    }
  });

  return session;
}

if (typeof document !== "undefined" && document.getElementById("upload") !== null) {
  bootstrap();
}
