/**
 * Browser-session state for iterative editing.
 *
 * One in-flight edit at a time; completed history entries are frozen and
 * re-displayed from memory, never re-fetched. Errors land in a banner and
 * leave the session intact, so a failed request is never destructive.
 */

import { ServiceError, base64ToBlob } from "./api.js";
import type { ServiceClient } from "./api.js";
import { toEditConfig, validateKnobs } from "./knobs.js";
import type { KnobState } from "./knobs.js";
import type { BundleView, DirectionStats, EditResponse } from "./types.js";

export interface HistoryEntry {
  readonly id: number;
  readonly instruction: string;
  readonly config: Readonly<Record<string, unknown>>;
  readonly editedImage: string; // base64 PNG
  readonly reconstruction: string; // base64 PNG
  readonly sourcePreview: string | null; // data URL of the source at submit time
  readonly captionUsed: string;
  readonly bundle: BundleView;
  readonly direction: DirectionStats;
  readonly provenance: Readonly<Record<string, unknown>>;
}

export interface SessionState {
  source: Blob | null;
  sourceLabel: string;
  sourcePreview: string | null;
  history: readonly HistoryEntry[];
  pending: boolean;
  banner: string | null;
  selectedEntry: number | null;
}

export class Session {
  private readonly client: ServiceClient;
  private readonly listeners: Array<(state: SessionState) => void> = [];
  private nextId = 1;

  state: SessionState = {
    source: null,
    sourceLabel: "",
    sourcePreview: null,
    history: [],
    pending: false,
    banner: null,
    selectedEntry: null,
  };

  constructor(client: ServiceClient) {
    this.client = client;
  }

  subscribe(listener: (state: SessionState) => void): void {
    this.listeners.push(listener);
  }

  private emit(): void {
    for (const listener of this.listeners) {
      listener(this.state);
    }
  }

  private update(patch: Partial<SessionState>): void {
    this.state = { ...this.state, ...patch };
    this.emit();
  }

  setSource(image: Blob, label: string, preview: string | null = null): void {
    this.update({ source: image, sourceLabel: label, sourcePreview: preview, banner: null });
  }

  /** Validate knobs + preconditions without touching the service. */
  canSubmit(instruction: string, knobs: KnobState): string[] {
    const problems = validateKnobs(knobs);
    if (this.state.source === null) {
      problems.unshift("upload a source image first");
    }
    if (instruction.trim() === "") {
      problems.push("instruction must be non-empty");
    }
    if (this.state.pending) {
      problems.push("a request is already running");
    }
    return problems;
  }

  async submitEdit(instruction: string, knobs: KnobState): Promise<HistoryEntry | null> {
    const problems = this.canSubmit(instruction, knobs);
    if (problems.length > 0) {
      this.update({ banner: problems.join("; ") });
      return null;
    }
    const config = toEditConfig(knobs);
    this.update({ pending: true, banner: null });
    try {
      const response: EditResponse = await this.client.editImage(
        this.state.source as Blob,
        instruction,
        config,
      );
      const entry: HistoryEntry = Object.freeze({
        id: this.nextId++,
        instruction,
        config: Object.freeze({ ...config }),
        editedImage: response.edited_image,
        reconstruction: response.reconstruction,
        sourcePreview: this.state.sourcePreview,
        captionUsed: response.caption_used,
        bundle: response.bundle,
        direction: response.direction,
        provenance: Object.freeze(response.provenance),
      });
      this.update({
        pending: false,
        history: Object.freeze([...this.state.history, entry]) as readonly HistoryEntry[],
        selectedEntry: entry.id,
      });
      return entry;
    } catch (error) {
      const message =
        error instanceof ServiceError
          ? `edit failed at stage ${error.stage}: ${error.message}`
          : `edit failed: ${String(error)}`;
      this.update({ pending: false, banner: message });
      return null;
    }
  }

  /** Replay: look up a finished entry in memory; no service call. */
  getEntry(id: number): HistoryEntry | undefined {
    return this.state.history.find((entry) => entry.id === id);
  }

  selectEntry(id: number): HistoryEntry | undefined {
    const entry = this.getEntry(id);
    if (entry !== undefined) {
      this.update({ selectedEntry: id });
    }
    return entry;
  }

  /** Iterative refinement: the edited result becomes the next source image. */
  promoteToSource(id: number): boolean {
    const entry = this.getEntry(id);
    if (entry === undefined) {
      return false;
    }
    this.setSource(
      base64ToBlob(entry.editedImage),
      `edit #${entry.id}`,
      `data:image/png;base64,${entry.editedImage}`,
    );
    return true;
  }

  async inspectDirections(
    instruction: string,
    knobs: KnobState,
    caption?: string,
  ): Promise<{ bundle: BundleView; direction: DirectionStats } | null> {
    const problems = validateKnobs(knobs);
    if (instruction.trim() === "") {
      problems.push("instruction must be non-empty");
    }
    if (problems.length > 0) {
      this.update({ banner: problems.join("; ") });
      return null;
    }
    this.update({ pending: true, banner: null });
    try {
      const response = await this.client.directions(instruction, toEditConfig(knobs), caption);
      this.update({ pending: false });
      return { bundle: response.bundle, direction: response.direction };
    } catch (error) {
      const message =
        error instanceof ServiceError
          ? `directions failed at stage ${error.stage}: ${error.message}`
          : `directions failed: ${String(error)}`;
      this.update({ pending: false, banner: message });
      return null;
    }
  }

  provenanceDownload(id: number): string | null {
    const entry = this.getEntry(id);
    if (entry === undefined) {
      return null;
    }
    return JSON.stringify({ instruction: entry.instruction, provenance: entry.provenance }, null, 2);
  }
}
