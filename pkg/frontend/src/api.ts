/** Client for the annotation service JSON API.
 *
 * All state lives on the server; the only client-side buffer is the retry
 * queue for label submissions that failed to reach the network.
 */

export type Round = "context_free" | "contextual";
export type StanceLabel = "favor" | "against" | "neither";

export interface TaskPayload {
  instance_id: string;
  thread_id: string;
  text: string;
  round: Round;
  ancestors: { instance_id: string; text: string }[];
  labels: StanceLabel[];
}

export interface LabelSubmission {
  instance_id: string;
  annotator_id: string;
  round: Round;
  label: StanceLabel;
}

export interface AttributionRecord {
  instance_id: string;
  p: number;
  q: number;
  word: string;
  contribution: number;
  is_keyword: boolean;
}

export interface AttributionReport {
  target_id: string;
  predicted_label: StanceLabel;
  confidence: number;
  records: AttributionRecord[];
}

export interface ApiError {
  code: string;
  message: string;
}

export class ApiFailure extends Error {
  constructor(public readonly status: number, public readonly error: ApiError) {
    super(`${error.code}: ${error.message}`);
  }
}

type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

export class ApiClient {
  /** Submissions that failed with a network error, oldest first. */
  readonly pendingLabels: LabelSubmission[] = [];

  constructor(
    private readonly baseUrl: string,
    private readonly projectId: string,
    private readonly fetchImpl: FetchLike = (u, i) => fetch(u, i),
  ) {}

  private async get<T>(path: string): Promise<T> {
    const res = await this.fetchImpl(`${this.baseUrl}${path}`);
    const body = await res.json();
    if (!res.ok) throw new ApiFailure(res.status, body as ApiError);
    return body as T;
  }

  async nextTask(annotator: string, round: Round): Promise<TaskPayload> {
    const params = new URLSearchParams({ annotator, round });
    return this.get<TaskPayload>(
      `/projects/${this.projectId}/next?${params.toString()}`,
    );
  }

  /** POST one label; on network failure the submission is queued for retry. */
  async submitLabel(label: LabelSubmission): Promise<{ sequence: number }> {
    await this.flushPending();
    let res: Response;
    try {
      res = await this.fetchImpl(`${this.baseUrl}/projects/${this.projectId}/labels`, {
        method: "POST",
        headers: { "Content-Type": "application/json" },
        body: JSON.stringify(label),
      });
    } catch (err) {
      this.pendingLabels.push(label);
      throw err;
    }
    const body = await res.json();
    if (!res.ok) throw new ApiFailure(res.status, body as ApiError);
    return body as { sequence: number };
  }

  /** Re-send queued submissions in order; stops at the first network failure.
   * Server-side rejections (duplicate, invalid) drop the entry: the server
   * already has the authoritative answer. */
  async flushPending(): Promise<number> {
    let flushed = 0;
    while (this.pendingLabels.length > 0) {
      const entry = this.pendingLabels[0];
      let res: Response;
      try {
        res = await this.fetchImpl(`${this.baseUrl}/projects/${this.projectId}/labels`, {
          method: "POST",
          headers: { "Content-Type": "application/json" },
          body: JSON.stringify(entry),
        });
      } catch {
        return flushed; // still offline; keep the queue intact
      }
      this.pendingLabels.shift();
      if (res.ok) flushed += 1;
    }
    return flushed;
  }

  async stats(): Promise<Record<string, unknown>> {
    return this.get(`/projects/${this.projectId}/stats`);
  }

  async attribution(instanceId: string): Promise<AttributionReport> {
    return this.get<AttributionReport>(`/attribution/${instanceId}`);
  }
}
