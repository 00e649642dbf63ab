/** Typed client for the editing service; fetch is injectable for tests. */

import type {
  DirectionsResponse,
  EditConfigPayload,
  EditResponse,
  HealthResponse,
} from "./types.js";

export class ServiceError extends Error {
  readonly stage: string;
  readonly status: number;

  constructor(stage: string, status: number, message: string) {
    super(message);
    this.stage = stage;
    this.status = status;
  }
}

export interface ServiceClient {
  editImage(image: Blob, instruction: string, config: EditConfigPayload): Promise<EditResponse>;
  directions(
    instruction: string,
    config: EditConfigPayload,
    caption?: string,
  ): Promise<DirectionsResponse>;
  health(): Promise<HealthResponse>;
}

async function parseOrThrow<T>(response: Response): Promise<T> {
  let body: unknown = null;
  try {
    body = await response.json();
  } catch {
    // non-JSON error body; fall through with nulls
  }
  if (!response.ok) {
    const record = (body ?? {}) as { stage?: string; error?: string; detail?: string };
    throw new ServiceError(
      record.stage ?? "request",
      response.status,
      record.error ?? record.detail ?? `service returned ${response.status}`,
    );
  }
  return body as T;
}

export function createClient(baseUrl = "", fetchFn: typeof fetch = fetch): ServiceClient {
  const url = (path: string) => `${baseUrl}${path}`;
  return {
    async editImage(image, instruction, config) {
      const form = new FormData();
      form.append("image", image, "source.png");
      form.append("instruction", instruction);
      form.append("config", JSON.stringify(config));
      const response = await fetchFn(url("/edit"), { method: "POST", body: form });
      return parseOrThrow<EditResponse>(response);
    },

    async directions(instruction, config, caption) {
      const response = await fetchFn(url("/directions"), {
        method: "POST",
        headers: { "Content-Type": "application/json" },
        body: JSON.stringify({ instruction, config, caption }),
      });
      return parseOrThrow<DirectionsResponse>(response);
    },

    async health() {
      const response = await fetchFn(url("/health"), { method: "GET" });
      return parseOrThrow<HealthResponse>(response);
    },
  };
}

export function base64ToBlob(base64: string, type = "image/png"): Blob {
  const binary = atob(base64);
  const bytes = new Uint8Array(binary.length);
  for (let i = 0; i < binary.length; i++) {
    bytes[i] = binary.charCodeAt(i);
  }
  return new Blob([bytes], { type });
}

export function base64ToDataUrl(base64: string, type = "image/png"): string {
  return `data:${type};base64,${base64}`;
}
