/**
 * Directions inspector controller: shows the generated before/after caption
 * sets for the current instruction and re-queries automatically when the
 * knobs change while the inspector is open.
 */

import type { KnobState } from "./knobs.js";
import type { Session } from "./session.js";
import type { BundleView } from "./types.js";

export class DirectionsInspector {
  private active = false;
  private lastInstruction = "";
  private lastCaption: string | undefined;

  constructor(
    private readonly session: Session,
    private readonly render: (bundle: BundleView) => void,
  ) {}

  async inspect(instruction: string, knobs: KnobState, caption?: string): Promise<BundleView | null> {
    this.active = true;
    this.lastInstruction = instruction;
    this.lastCaption = caption;
    const view = await this.session.inspectDirections(instruction, knobs, caption);
    if (view === null) {
      return null;
    }
    this.render(view.bundle);
    return view.bundle;
  }

  /** Re-query with the new knob values when the inspector is already open. */
  async onKnobsChanged(knobs: KnobState): Promise<BundleView | null> {
    if (!this.active) {
      return null;
    }
    return this.inspect(this.lastInstruction, knobs, this.lastCaption);
  }

  close(): void {
    this.active = false;
  }
}
