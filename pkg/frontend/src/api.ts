/**
 * Thin fetch client over the labeling service. Every payload crossing the
 * wire is validated against the shared schemas.
 */
import {
  Task,
  TaskSchema,
  VoteAck,
  VoteAckSchema,
  VoteBody,
  VoteBodySchema,
} from "./schema.js";

export class ApiError extends Error {
  constructor(message: string, readonly status?: number) {
    super(message);
    this.name = "ApiError";
  }
}

export class ApiClient {
  constructor(
    private readonly baseUrl: string = "",
    private readonly fetchFn: typeof fetch = fetch,
  ) {}

  /** Next task for the judge, or null when everything is voted. */
  async nextTask(judge: string): Promise<Task | null> {
    const url = `${this.baseUrl}/api/task?judge=${encodeURIComponent(judge)}`;
    const resp = await this.fetchFn(url);
    if (!resp.ok) {
      throw new ApiError(`task request failed (${resp.status})`, resp.status);
    }
    const body = await resp.json();
    if (body === null) {
      return null;
    }
    return TaskSchema.parse(body);
  }

  async submitVote(vote: VoteBody): Promise<VoteAck> {
    const body = VoteBodySchema.parse(vote);
    const resp = await this.fetchFn(`${this.baseUrl}/api/vote`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify(body),
    });
    if (!resp.ok) {
      throw new ApiError(`vote rejected (${resp.status})`, resp.status);
    }
    return VoteAckSchema.parse(await resp.json());
  }

  resolve(path: string): string {
    return `${this.baseUrl}${path}`;
  }
}
