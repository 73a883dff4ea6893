/**
 * DOM glue: renders the session state into the page and wires the forms.
 *
 * Rendering is a straight readout of the session -- every label, rationale
 * entry and probability shown here came from the server untouched.
 */

import { ApiClient } from "./api.js";
import { ConsoleSession, ItemRow } from "./session.js";

function el<K extends keyof HTMLElementTagNameMap>(
  tag: K,
  className?: string,
  text?: string,
): HTMLElementTagNameMap[K] {
  const node = document.createElement(tag);
  if (className) node.className = className;
  if (text !== undefined) node.textContent = text;
  return node;
}

function renderRow(row: ItemRow): HTMLTableRowElement {
  const tr = el("tr", row.label === 1 ? "relevant" : row.miss ? "miss" : "irrelevant");
  tr.appendChild(el("td", undefined, row.itemId));
  tr.appendChild(
    el("td", "label", row.miss ? "MISS" : row.label === null ? "-" : String(row.label)),
  );
  const cell = el("td", "rationale");
  for (const entry of row.rationale) {
    const chip = el("span", entry.matched ? "entity matched" : "entity", entry.entity);
    if (entry.probability !== null) {
      chip.title = `p = ${entry.probability.toFixed(3)}`;
      chip.appendChild(el("small", undefined, ` ${entry.probability.toFixed(2)}`));
    }
    cell.appendChild(chip);
  }
  tr.appendChild(cell);
  return tr;
}

export function renderSession(session: ConsoleSession, root: HTMLElement): void {
  root.replaceChildren();

  const banner = el("div", "banners");
  if (session.staleBanner) {
    banner.appendChild(el("div", "banner stale", "Cache changed on the server - refresh to sync."));
  }
  if (session.conflictBanner) {
    banner.appendChild(el("div", "banner conflict",
      "Edit conflicted with another writer and was not applied."));
  }
  root.appendChild(banner);

  const status = el("div", "status");
  status.appendChild(el("span", "version", `cache v${session.lastSeenVersion}`));
  status.appendChild(el("span", "actions", `${session.actions} actions this session`));
  if (session.rules) {
    status.appendChild(
      el("span", "rules", `rules: ${session.rules.entities.map((e) => e.text).join(", ") || "(none)"}`),
    );
  } else if (session.currentQuery) {
    status.appendChild(el("span", "rules miss", "query not cached (MISS - score via model)"));
  }
  root.appendChild(status);

  const table = el("table", "rows");
  const head = el("tr");
  for (const title of ["item", "label", "rationale"]) {
    head.appendChild(el("th", undefined, title));
  }
  table.appendChild(head);
  for (const row of session.rows) {
    table.appendChild(renderRow(row));
  }
  root.appendChild(table);
}

export function mountConsole(root: HTMLElement, baseUrl: string): ConsoleSession {
  const api = new ApiClient(baseUrl);
  const session = new ConsoleSession(api);

  const form = el("div", "controls");
  const queryInput = el("input");
  queryInput.placeholder = "query text";
  const itemsInput = el("input");
  itemsInput.placeholder = "item ids, comma separated";
  const viewButton = el("button", undefined, "view");
  const entityInput = el("input");
  entityInput.placeholder = "entity";
  const addButton = el("button", undefined, "add rule");
  const deleteButton = el("button", undefined, "delete rule");
  const impact = el("span", "impact");
  for (const node of [queryInput, itemsInput, viewButton, entityInput, addButton, deleteButton, impact]) {
    form.appendChild(node);
  }
  const output = el("div", "output");
  root.replaceChildren(form, output);

  const redraw = () => renderSession(session, output);

  viewButton.addEventListener("click", () => {
    const ids = itemsInput.value.split(",").map((s) => s.trim()).filter(Boolean);
    void session.viewQuery(queryInput.value, ids).then(redraw);
  });
  const edit = (action: "add" | "delete") => {
    void session.editRule(action, entityInput.value).then((outcome) => {
      impact.textContent = outcome.applied
        ? `${outcome.impact} displayed item(s) changed`
        : "no change";
      redraw();
    });
  };
  addButton.addEventListener("click", () => edit("add"));
  deleteButton.addEventListener("click", () => edit("delete"));

  return session;
}
