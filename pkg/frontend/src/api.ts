/**
 * Typed client for the /v1 relevance service API.
 *
 * Every mutation carries the caller's last-seen cache version so a stale
 * writer gets a 409 instead of silently clobbering someone else's edit.
 */

export interface RationaleEntry {
  entity: string;
  probability: number | null;
  matched: boolean;
}

export interface Prediction {
  label: number | null;
  cache_hit: boolean;
  miss?: boolean;
  rationale: RationaleEntry[];
  version: number;
}

export interface RuleEntity {
  text: string;
  provenance: string;
}

export interface RuleSet {
  query: string;
  rule_version: number;
  version: number;
  entities: RuleEntity[];
}

export interface MutationResult {
  applied: boolean;
  version: number;
  rule_version: number | null;
}

export interface VersionInfo {
  version: number;
  model_checkpoint_ref: string;
  fallback_on_miss: boolean;
}

export interface EvalReport {
  accuracy: number;
  pos_acc: number;
  neg_acc: number;
  macro_f1: number;
  tp: number;
  fp: number;
  tn: number;
  fn: number;
  pairs: number;
  version: number;
}

export class ApiError extends Error {
  constructor(
    readonly status: number,
    readonly payload: unknown,
  ) {
    super(`HTTP ${status}`);
  }
}

export class ConflictError extends ApiError {
  constructor(
    payload: unknown,
    readonly serverVersion: number,
  ) {
    super(409, payload);
  }
}

export type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

export class ApiClient {
  constructor(
    private readonly baseUrl: string,
    private readonly fetchFn: FetchLike = (url, init) => fetch(url, init),
  ) {}

  private async request<T>(method: string, path: string, body?: unknown): Promise<T> {
    const init: RequestInit = { method, headers: { "Content-Type": "application/json" } };
    if (body !== undefined) {
      init.body = JSON.stringify(body);
    }
    const response = await this.fetchFn(`${this.baseUrl}${path}`, init);
    const payload = (await response.json()) as Record<string, unknown>;
    if (response.status === 409) {
      throw new ConflictError(payload, payload["version"] as number);
    }
    if (!response.ok) {
      throw new ApiError(response.status, payload);
    }
    return payload as T;
  }

  getVersion(): Promise<VersionInfo> {
    return this.request("GET", "/v1/version");
  }

  getPrediction(query: string, itemId: string): Promise<Prediction> {
    const q = encodeURIComponent(query);
    const i = encodeURIComponent(itemId);
    return this.request("GET", `/v1/predict?query=${q}&item_id=${i}`);
  }

  postPrediction(query: string, title: string): Promise<Prediction> {
    return this.request("POST", "/v1/predict", { query, title });
  }

  getRules(query: string): Promise<RuleSet> {
    return this.request("GET", `/v1/rules/${encodeURIComponent(query)}`);
  }

  addRuleEntity(query: string, entity: string, expectedVersion?: number): Promise<MutationResult> {
    const body: Record<string, unknown> = { entity };
    if (expectedVersion !== undefined) {
      body["expected_version"] = expectedVersion;
    }
    return this.request("POST", `/v1/rules/${encodeURIComponent(query)}/entities`, body);
  }

  deleteRuleEntity(query: string, entity: string, expectedVersion?: number): Promise<MutationResult> {
    const q = encodeURIComponent(query);
    const e = encodeURIComponent(entity);
    const suffix = expectedVersion === undefined ? "" : `?expected_version=${expectedVersion}`;
    return this.request("DELETE", `/v1/rules/${q}/entities/${e}${suffix}`);
  }

  evalDataset(name: string): Promise<EvalReport> {
    return this.request("POST", "/v1/eval", { dataset: name });
  }
}
