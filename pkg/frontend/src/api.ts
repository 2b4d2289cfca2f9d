/**
 * Typed client for the gateway JSON API. Every console capability goes
 * through these public endpoints; there is no privileged back channel.
 */

export interface TokenStore {
  get(): string | null;
  set(token: string | null): void;
}

/** Session-storage backed token holder (browser); tests inject a memory one. */
export function sessionTokenStore(storage: Storage): TokenStore {
  return {
    get: () => storage.getItem("flowline_token"),
    set: (token) => {
      if (token === null) storage.removeItem("flowline_token");
      else storage.setItem("flowline_token", token);
    },
  };
}

export function memoryTokenStore(): TokenStore {
  let token: string | null = null;
  return { get: () => token, set: (t) => { token = t; } };
}

export class ApiError extends Error {
  constructor(
    readonly status: number,
    readonly code: string,
    message: string,
    readonly detail?: unknown,
  ) {
    super(message);
  }
}

export interface LoginResult {
  access_token: string;
  subject: string;
  scopes: string[];
  expires_at: number;
}

export interface Identity {
  sub: string;
  username: string | null;
  scopes: string[];
}

export interface FlowDoc {
  flow_id: string;
  title: string;
  description: string | null;
  keywords: string[];
  input_schema: Record<string, unknown>;
  scope: string;
  action_url: string;
}

export interface RunEvent {
  seq: number;
  ts: string;
  kind: string;
  state: string | null;
  detail: Record<string, unknown>;
}

export interface RunDoc {
  run_id: string;
  flow_id: string;
  status: "ACTIVE" | "SUCCEEDED" | "FAILED" | "CANCELED" | "INACTIVE";
  current_state: string | null;
  context: Record<string, unknown>;
  output: unknown;
  creator: string;
  label: string | null;
  tags: string[];
  monitor_by: string[];
  manage_by: string[];
  inactive_reason: string | null;
  created: string;
  updated: string;
  completed: string | null;
  events?: RunEvent[];
}

export interface PendingSelection {
  action_id: string;
  state: string;
  creator: string;
  start_time: string;
  body: { options: unknown[]; prompt?: string };
}

export interface RunFilters {
  status?: string;
  tag?: string;
  label?: string;
  flow_id?: string;
}

type FetchLike = (input: string, init?: RequestInit) => Promise<Response>;

export class ApiClient {
  constructor(
    readonly baseUrl: string,
    readonly tokens: TokenStore,
    private readonly fetchImpl: FetchLike = (input, init) => fetch(input, init),
  ) {}

  private async request<T>(method: string, path: string, body?: unknown): Promise<T> {
    const headers: Record<string, string> = {};
    const token = this.tokens.get();
    if (token) headers["Authorization"] = `Bearer ${token}`;
    if (body !== undefined) headers["Content-Type"] = "application/json";
    const response = await this.fetchImpl(this.baseUrl + path, {
      method,
      headers,
      body: body === undefined ? undefined : JSON.stringify(body),
    });
    const text = await response.text();
    let doc: unknown = null;
    try {
      doc = text ? JSON.parse(text) : null;
    } catch {
      doc = text;
    }
    if (!response.ok) {
      const err = (doc ?? {}) as { code?: string; message?: string; detail?: unknown };
      throw new ApiError(response.status, err.code ?? "error",
        err.message ?? `HTTP ${response.status}`, err.detail);
    }
    return doc as T;
  }

  async login(username: string, secret: string, scopes: string[] = [],
              consentAll = true): Promise<LoginResult> {
    const result = await this.request<LoginResult>("POST", "/auth/token", {
      username, secret, scopes, consent: consentAll ? "all" : null,
    });
    this.tokens.set(result.access_token);
    return result;
  }

  whoami(): Promise<Identity> {
    return this.request("GET", "/whoami");
  }

  listFlows(keyword?: string): Promise<{ flows: FlowDoc[] }> {
    const q = keyword ? `?keyword=${encodeURIComponent(keyword)}` : "";
    return this.request("GET", `/flows${q}`);
  }

  getFlow(flowId: string): Promise<FlowDoc> {
    return this.request("GET", `/flows/${flowId}`);
  }

  listRuns(filters: RunFilters = {}): Promise<{ runs: RunDoc[] }> {
    const params = new URLSearchParams();
    for (const [key, value] of Object.entries(filters)) {
      if (value) params.set(key, value);
    }
    const q = params.toString();
    return this.request("GET", `/runs${q ? "?" + q : ""}`);
  }

  getRun(runId: string, withEvents = true): Promise<RunDoc> {
    return this.request("GET", `/runs/${runId}${withEvents ? "?include=events" : ""}`);
  }

  startRun(flowId: string, input: unknown, options: { label?: string; tags?: string[] } = {}):
      Promise<{ run_id: string; state: string }> {
    return this.request("POST", `/flows/${flowId}/run`, {
      body: input,
      label: options.label ?? null,
      tags: options.tags ?? [],
    });
  }

  cancelRun(runId: string): Promise<RunDoc> {
    return this.request("POST", `/runs/${runId}/cancel`);
  }

  pendingSelections(): Promise<{ pending: PendingSelection[] }> {
    return this.request("GET", "/selections/pending");
  }

  respondSelection(actionId: string, selection: unknown): Promise<{ state: string }> {
    return this.request("POST", `/providers/user_selection/${actionId}/respond`, { selection });
  }
}
