/**
 * Console session state: the operator's current query, the displayed item
 * rows, and the rule-editing workflow.
 *
 * The session is a pure client of the HTTP API.  Row labels and rationales
 * are always whatever the server last returned -- the client never
 * recomputes relevance, it only re-fetches after an edit and reports how
 * many displayed rows changed.
 */

import {
  ApiClient,
  ConflictError,
  EvalReport,
  Prediction,
  RationaleEntry,
  RuleSet,
} from "./api.js";

export interface ItemRow {
  itemId: string;
  label: number | null;
  miss: boolean;
  rationale: RationaleEntry[];
  version: number;
}

export interface EditOutcome {
  applied: boolean;
  impact: number;          // displayed rows whose label changed
  flippedItemIds: string[];
  version: number;
}

export interface EvalDiff {
  before: EvalReport;
  after: EvalReport;
  actions: number;
}

export class ConsoleSession {
  currentQuery = "";
  rows: ItemRow[] = [];
  rules: RuleSet | null = null;
  lastSeenVersion = 0;
  staleBanner = false;
  conflictBanner = false;
  actions = 0;
  private baselineEval: EvalReport | null = null;

  constructor(private readonly api: ApiClient) {}

  /** Fetch predictions for every item the operator wants to inspect. */
  async viewQuery(query: string, itemIds: string[]): Promise<ItemRow[]> {
    this.currentQuery = query;
    const rows: ItemRow[] = [];
    for (const itemId of itemIds) {
      const p: Prediction = await this.api.getPrediction(query, itemId);
      rows.push({
        itemId,
        label: p.label,
        miss: p.miss === true,
        rationale: p.rationale,
        version: p.version,
      });
      this.lastSeenVersion = p.version;
    }
    this.rows = rows;
    this.staleBanner = false;
    try {
      this.rules = await this.api.getRules(query);
    } catch {
      this.rules = null; // uncached query: rows carry the MISS state
    }
    return rows;
  }

  /**
   * Add or delete one rule entity, then re-fetch the displayed rows.
   *
   * The mutation carries the last seen version; a concurrent edit by someone
   * else surfaces as a conflict banner and a refresh, never a silent
   * overwrite.
   */
  async editRule(action: "add" | "delete", entity: string): Promise<EditOutcome> {
    const before = new Map(this.rows.map((r) => [r.itemId, r.label]));
    let result;
    try {
      result =
        action === "add"
          ? await this.api.addRuleEntity(this.currentQuery, entity, this.lastSeenVersion)
          : await this.api.deleteRuleEntity(this.currentQuery, entity, this.lastSeenVersion);
    } catch (error) {
      if (error instanceof ConflictError) {
        this.conflictBanner = true;
        this.staleBanner = true;
        this.lastSeenVersion = error.serverVersion;
        await this.refreshRows();
        return { applied: false, impact: 0, flippedItemIds: [], version: error.serverVersion };
      }
      throw error;
    }
    this.conflictBanner = false;
    this.lastSeenVersion = result.version;
    if (result.applied) {
      this.actions += 1;
    }
    await this.refreshRows();
    const flipped = this.rows.filter((r) => before.get(r.itemId) !== r.label);
    return {
      applied: result.applied,
      impact: flipped.length,
      flippedItemIds: flipped.map((r) => r.itemId),
      version: result.version,
    };
  }

  /** Re-fetch every displayed row (labels and rationales from the server). */
  async refreshRows(): Promise<void> {
    const refreshed: ItemRow[] = [];
    for (const row of this.rows) {
      const p = await this.api.getPrediction(this.currentQuery, row.itemId);
      refreshed.push({
        itemId: row.itemId,
        label: p.label,
        miss: p.miss === true,
        rationale: p.rationale,
        version: p.version,
      });
      this.lastSeenVersion = p.version;
    }
    this.rows = refreshed;
    if (this.currentQuery) {
      try {
        this.rules = await this.api.getRules(this.currentQuery);
      } catch {
        this.rules = null;
      }
    }
  }

  /** Compare the server version against what this session last saw. */
  async checkStale(): Promise<boolean> {
    const info = await this.api.getVersion();
    this.staleBanner = info.version !== this.lastSeenVersion;
    return this.staleBanner;
  }

  /**
   * Before/after metrics for the operator's session edits.
   *
   * The first call pins the "before" snapshot; later calls re-evaluate and
   * report it against the pinned baseline together with the action count.
   */
  async evalDiff(dataset: string): Promise<EvalDiff> {
    const current = await this.api.evalDataset(dataset);
    if (this.baselineEval === null) {
      this.baselineEval = current;
    }
    return { before: this.baselineEval, after: current, actions: this.actions };
  }
}
