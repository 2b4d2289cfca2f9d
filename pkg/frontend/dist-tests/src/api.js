/**
 * Typed client for the gateway JSON API. Every console capability goes
 * through these public endpoints; there is no privileged back channel.
 */
/** Session-storage backed token holder (browser); tests inject a memory one. */
export function sessionTokenStore(storage) {
    return {
        get: () => storage.getItem("flowline_token"),
        set: (token) => {
            if (token === null)
                storage.removeItem("flowline_token");
            else
                storage.setItem("flowline_token", token);
        },
    };
}
export function memoryTokenStore() {
    let token = null;
    return { get: () => token, set: (t) => { token = t; } };
}
export class ApiError extends Error {
    constructor(status, code, message, detail) {
        super(message);
        this.status = status;
        this.code = code;
        this.detail = detail;
    }
}
export class ApiClient {
    constructor(baseUrl, tokens, fetchImpl = (input, init) => fetch(input, init)) {
        this.baseUrl = baseUrl;
        this.tokens = tokens;
        this.fetchImpl = fetchImpl;
    }
    async request(method, path, body) {
        const headers = {};
        const token = this.tokens.get();
        if (token)
            headers["Authorization"] = `Bearer ${token}`;
        if (body !== undefined)
            headers["Content-Type"] = "application/json";
        const response = await this.fetchImpl(this.baseUrl + path, {
            method,
            headers,
            body: body === undefined ? undefined : JSON.stringify(body),
        });
        const text = await response.text();
        let doc = null;
        try {
            doc = text ? JSON.parse(text) : null;
        }
        catch {
            doc = text;
        }
        if (!response.ok) {
            const err = (doc ?? {});
            throw new ApiError(response.status, err.code ?? "error", err.message ?? `HTTP ${response.status}`, err.detail);
        }
        return doc;
    }
    async login(username, secret, scopes = [], consentAll = true) {
        const result = await this.request("POST", "/auth/token", {
            username, secret, scopes, consent: consentAll ? "all" : null,
        });
        this.tokens.set(result.access_token);
        return result;
    }
    whoami() {
        return this.request("GET", "/whoami");
    }
    listFlows(keyword) {
        const q = keyword ? `?keyword=${encodeURIComponent(keyword)}` : "";
        return this.request("GET", `/flows${q}`);
    }
    getFlow(flowId) {
        return this.request("GET", `/flows/${flowId}`);
    }
    listRuns(filters = {}) {
        const params = new URLSearchParams();
        for (const [key, value] of Object.entries(filters)) {
            if (value)
                params.set(key, value);
        }
        const q = params.toString();
        return this.request("GET", `/runs${q ? "?" + q : ""}`);
    }
    getRun(runId, withEvents = true) {
        return this.request("GET", `/runs/${runId}${withEvents ? "?include=events" : ""}`);
    }
    startRun(flowId, input, options = {}) {
        return this.request("POST", `/flows/${flowId}/run`, {
            body: input,
            label: options.label ?? null,
            tags: options.tags ?? [],
        });
    }
    cancelRun(runId) {
        return this.request("POST", `/runs/${runId}/cancel`);
    }
    pendingSelections() {
        return this.request("GET", "/selections/pending");
    }
    respondSelection(actionId, selection) {
        return this.request("POST", `/providers/user_selection/${actionId}/respond`, { selection });
    }
}
