// Researcher workbench: variable builder, dataset dashboard, QA mitigation
// queue, and ingestion/admin panels. Pure REST client; the only client-side
// computation is chart axes and colors.

import { ApiError, Client, pollBatch, pollDataset } from "./api.js";
import { heatColor, parseCsv } from "./csv.js";
import { buildDatasetSpec, buildVariable, validateVariable } from "./variableBuilder.js";
import type { ConceptInfo, VariableDef } from "./types.js";

const POLL_MS = 2000;

interface AppState {
  client: Client;
  concepts: ConceptInfo[];
  operations: string[];
  projects: { project_id: string; name: string }[];
  variables: VariableDef[];
}

function el<K extends keyof HTMLElementTagNameMap>(
    tag: K, attrs: Record<string, string> = {}, ...children: (Node | string)[]
): HTMLElementTagNameMap[K] {
  const node = document.createElement(tag);
  for (const [key, value] of Object.entries(attrs)) {
    if (key === "class") node.className = value;
    else node.setAttribute(key, value);
  }
  node.append(...children);
  return node;
}

function option(value: string, label?: string): HTMLOptionElement {
  return el("option", { value }, label ?? value);
}

function notice(kind: "ok" | "err", text: string): HTMLElement {
  return el("div", { class: `notice ${kind}` }, text);
}

// ---------------------------------------------------------------------------
// variable builder view
// ---------------------------------------------------------------------------

function variableBuilderView(state: AppState, rerender: () => void): HTMLElement {
  const root = el("section", { class: "panel" });
  root.append(el("h2", {}, "Variable builder"));

  const nameInput = el("input", { placeholder: "variable name", id: "var-name" });
  const conceptSelect = el("select", { id: "var-concept" });
  conceptSelect.append(option("", "(derived from variables)"));
  for (const c of state.concepts) conceptSelect.append(option(c.name));
  const opSelect = el("select", { id: "var-operation" });
  for (const op of state.operations) opSelect.append(option(op));
  const valueInput = el("input", { placeholder: "value (e.g. O10.)", id: "var-value" });

  const tfSelect = el("select", { id: "var-tf" });
  tfSelect.append(option("always"), option("absolute-range"), option("anchor-relative"));
  const tfAnchor = el("select", { id: "var-anchor" });
  for (const c of state.concepts.filter((c) => c.value_kind === "timestamp")) {
    tfAnchor.append(option(c.name));
  }
  const tfBefore = el("input", { placeholder: "days before", value: "0" });
  const tfAfter = el("input", { placeholder: "days after", value: "30" });

  const constraintsSelect = el("select", { id: "var-constraints", multiple: "true" });
  const mappingSelect = el("select", { id: "var-mapping" });
  for (const p of ["default", "common-ordering", "alphabetical"]) {
    mappingSelect.append(option(p));
  }
  const derivedSelect = el("select", { id: "var-derived", multiple: "true" });
  const refresh = () => {
    constraintsSelect.replaceChildren();
    derivedSelect.replaceChildren();
    for (const v of state.variables) {
      constraintsSelect.append(option(v.name));
      derivedSelect.append(option(v.name));
    }
  };
  refresh();

  const problems = el("div", { class: "problems" });
  const list = el("ul", { class: "variable-list" });
  const renderList = () => {
    list.replaceChildren(...state.variables.map((v) =>
      el("li", {}, `${v.name} = ${v.operation}(${v.data_source.concept
        ?? (v.data_source.variables ?? []).join(",")}${v.value ? `, ${v.value}` : ""})`)));
  };
  renderList();

  const selected = (select: HTMLSelectElement) =>
    [...select.selectedOptions].map((o) => o.value);

  const addButton = el("button", { id: "var-add" }, "Add variable");
  addButton.onclick = () => {
    const day = 86_400_000;
    const inputs = {
      name: nameInput.value.trim(),
      concept: conceptSelect.value || undefined,
      derivedFrom: selected(derivedSelect),
      operation: opSelect.value,
      value: valueInput.value || null,
      timeframe: tfSelect.value === "always" ? { kind: "always" as const }
        : tfSelect.value === "anchor-relative"
          ? { kind: "anchor-relative" as const,
              anchor: { concept: tfAnchor.value,
                        before_ms: Number(tfBefore.value) * day,
                        after_ms: Number(tfAfter.value) * day } }
          : { kind: "absolute-range" as const, range: [0, Date.now()] as [number, number] },
      constraints: selected(constraintsSelect),
      mapping: { policy: mappingSelect.value as "default" },
    };
    const issues = validateVariable(inputs, state.operations, state.concepts);
    if (issues.length) {
      problems.replaceChildren(notice("err", issues.join("; ")));
      return;
    }
    state.variables.push(buildVariable(inputs, state.operations, state.concepts));
    problems.replaceChildren(notice("ok", `added ${inputs.name}`));
    renderList();
    refresh();
  };

  const datasetName = el("input", { placeholder: "dataset name", id: "ds-name" });
  const projectSelect = el("select", { id: "ds-project" });
  for (const p of state.projects) projectSelect.append(option(p.project_id, p.name));
  const launchStatus = el("div", { class: "status", id: "launch-status" });
  const launchButton = el("button", { id: "ds-launch" }, "Launch dataset");
  launchButton.onclick = async () => {
    try {
      const spec = buildDatasetSpec(datasetName.value.trim(), projectSelect.value,
                                    state.variables);
      const { dataset_id, version } = await state.client.launchDataset(
        spec, crypto.randomUUID());
      launchStatus.replaceChildren(notice("ok", `launched ${dataset_id} v${version}`));
      const manifest = await pollDataset(state.client, dataset_id, version, POLL_MS);
      launchStatus.replaceChildren(
        notice(manifest.state === "complete" ? "ok" : "err",
               `${dataset_id} v${version}: ${manifest.state}, ${manifest.row_count} rows`));
      rerender();
    } catch (err) {
      launchStatus.replaceChildren(notice("err", String(err)));
    }
  };

  root.append(
    el("div", { class: "form-grid" },
       el("label", {}, "Name ", nameInput),
       el("label", {}, "Source ", conceptSelect),
       el("label", {}, "Derived from ", derivedSelect),
       el("label", {}, "Operation ", opSelect),
       el("label", {}, "Value ", valueInput),
       el("label", {}, "Timeframe ", tfSelect, tfAnchor, tfBefore, tfAfter),
       el("label", {}, "Constraints ", constraintsSelect),
       el("label", {}, "Mapping ", mappingSelect),
       addButton),
    problems, list,
    el("h3", {}, "Launch"),
    el("div", { class: "form-grid" },
       el("label", {}, "Dataset ", datasetName),
       el("label", {}, "Project ", projectSelect),
       launchButton),
    launchStatus);
  return root;
}

// ---------------------------------------------------------------------------
// dataset dashboard
// ---------------------------------------------------------------------------

async function datasetDashboardView(state: AppState): Promise<HTMLElement> {
  const root = el("section", { class: "panel" });
  root.append(el("h2", {}, "Datasets"));
  const { datasets } = await state.client.datasets();
  const table = el("table", { class: "grid", id: "dataset-table" });
  table.append(el("tr", {},
    ...["dataset", "version", "state", "rows", "files", "summary"].map((h) =>
      el("th", {}, h))));
  const detail = el("div", { id: "dataset-detail" });

  for (const m of datasets) {
    const row = el("tr", {});
    row.append(el("td", {}, m.name), el("td", {}, `v${m.version}`),
               el("td", { class: m.state }, m.state),
               el("td", {}, String(m.row_count ?? "")));
    const files = el("td", {});
    for (const kind of ["human", "numeric"] as const) {
      if (!m.files[kind]) continue;
      const link = el("a", { href: "#", class: "download" }, kind);
      link.onclick = async (event) => {
        event.preventDefault();
        const text = await state.client.downloadDatasetFile(m.dataset_id, m.version, kind);
        const blob = new Blob([text], { type: "text/csv" });
        const anchor = el("a", {
          href: URL.createObjectURL(blob),
          download: `${m.name}-v${m.version}-${kind}.csv`,
        });
        anchor.click();
      };
      files.append(link, " ");
    }
    row.append(files);
    const summaryCell = el("td", {});
    const showButton = el("button", {}, "view");
    showButton.onclick = () => renderAnalyses(state, m.dataset_id, m.version, detail);
    summaryCell.append(showButton);
    row.append(summaryCell);
    table.append(row);
  }
  root.append(table, detail);
  return root;
}

async function renderAnalyses(state: AppState, datasetId: string, version: number,
                              target: HTMLElement): Promise<void> {
  const { analyses } = await state.client.analyses(datasetId, version);
  target.replaceChildren(el("h3", {}, "Automatic analysis"));
  for (const info of analyses) {
    for (const [name] of Object.entries(info.files)) {
      const text = await state.client.exportAnalysis(info.analysis_id, name);
      const rows = parseCsv(text);
      if (!rows.length) continue;
      if (name === "correlation") {
        target.append(el("h4", {}, "Correlation map"), correlationHeatmap(rows));
      } else {
        const table = el("table", { class: "grid" });
        table.append(el("tr", {}, ...rows[0].map((h) => el("th", {}, h))));
        for (const row of rows.slice(1)) {
          table.append(el("tr", {}, ...row.map((c) => el("td", {}, c))));
        }
        target.append(el("h4", {}, name), table);
      }
    }
  }
}

function correlationHeatmap(rows: string[][]): HTMLElement {
  const table = el("table", { class: "grid heatmap" });
  table.append(el("tr", {}, ...rows[0].map((h) => el("th", {}, h))));
  for (const row of rows.slice(1)) {
    const tr = el("tr", {}, el("th", {}, row[0]));
    for (const cell of row.slice(1)) {
      const value = cell === "" ? null : Number(cell);
      const td = el("td", {}, cell === "" ? "" : Number(cell).toFixed(2));
      td.style.background = heatColor(value);
      tr.append(td);
    }
    table.append(tr);
  }
  return table;
}

// ---------------------------------------------------------------------------
// QA mitigation queue
// ---------------------------------------------------------------------------

async function qaQueueView(state: AppState, rerender: () => void): Promise<HTMLElement> {
  const root = el("section", { class: "panel" });
  root.append(el("h2", {}, "QA/QC mitigation queue"));

  const { translators } = await state.client.translators();
  const haltBar = el("div", { class: "halt-bar" });
  for (const t of translators) {
    const button = el("button", { class: t.halt ? "halted" : "" },
                      `${t.translator_id} v${t.version}${t.halt ? " (HALTED)" : ""}`);
    button.onclick = async () => {
      try {
        if (t.halt) await state.client.resume(t.translator_id);
        else await state.client.halt(t.translator_id);
        rerender();
      } catch (err) {
        haltBar.append(notice("err", err instanceof ApiError ? err.body : String(err)));
      }
    };
    haltBar.append(button);
  }
  root.append(el("h3", {}, "Translators (HALT / resume)"), haltBar);

  const { qa_rows } = await state.client.qaRows("open");
  root.append(el("h3", {}, `Open rows (${qa_rows.length})`));
  for (const qa of qa_rows) {
    const payload = el("code", {}, qa.payload ?? "(no payload)");
    const correction = el("input", {
      class: "correction", value: qa.payload ?? "", id: `fix-${qa.qa_id}`,
    });
    const status = el("span", { class: "status" });
    const mitigateButton = el("button", {}, "Sign off correction");
    mitigateButton.onclick = async () => {
      try {
        await state.client.mitigate(qa.qa_id, correction.value);
        status.replaceChildren(notice("ok", "mitigated"));
        rerender();
      } catch (err) {
        status.replaceChildren(notice("err", err instanceof ApiError ? err.body : String(err)));
      }
    };
    const dismissButton = el("button", {}, "Dismiss");
    dismissButton.onclick = async () => {
      await state.client.dismiss(qa.qa_id, "reviewed: not an error");
      rerender();
    };
    root.append(el("div", { class: "qa-row" },
                   el("div", {}, el("strong", {}, qa.pathway), " ", qa.status_message),
                   el("div", {}, "payload: ", payload),
                   el("div", {}, correction, mitigateButton, dismissButton, status)));
  }
  return root;
}

// ---------------------------------------------------------------------------
// ingestion and admin panels
// ---------------------------------------------------------------------------

async function adminView(state: AppState): Promise<HTMLElement> {
  const root = el("section", { class: "panel" });
  root.append(el("h2", {}, "Ingestion"));

  const { sources } = await state.client.sources();
  const sourceSelect = el("select", { id: "pull-source" });
  for (const s of sources) sourceSelect.append(option(s.source_id));
  const countInput = el("input", { value: "2", id: "pull-count" });
  const projectSelect = el("select", { id: "pull-project" });
  for (const p of state.projects) projectSelect.append(option(p.project_id, p.name));
  const pullStatus = el("div", { class: "status", id: "pull-status" });
  const pullButton = el("button", { id: "pull-start" }, "Pull from source");
  pullButton.onclick = async () => {
    const source = sources.find((s) => s.source_id === sourceSelect.value);
    if (!source) return;
    const ids = source.patients.slice(0, Number(countInput.value));
    try {
      const { batch_id } = await state.client.pull({
        source: source.source_id, patient_ids: ids, project_id: projectSelect.value,
      });
      pullStatus.replaceChildren(notice("ok", `batch ${batch_id} staged`));
      const status = await pollBatch(state.client, batch_id, POLL_MS);
      pullStatus.replaceChildren(notice(
        status.status === "complete" ? "ok" : "err",
        `batch ${batch_id}: ${status.status} (${status.done_blocks}/${status.total_blocks} blocks)`));
    } catch (err) {
      pullStatus.replaceChildren(notice("err", String(err)));
    }
  };
  root.append(el("div", { class: "form-grid" },
                 el("label", {}, "Source ", sourceSelect),
                 el("label", {}, "Patients ", countInput),
                 el("label", {}, "Project ", projectSelect),
                 pullButton),
              pullStatus);

  const overview = await state.client.overview();
  const depthTable = el("table", { class: "grid", id: "queue-depths" });
  depthTable.append(el("tr", {}, el("th", {}, "queue"), el("th", {}, "visible"),
                       el("th", {}, "in-flight"), el("th", {}, "dead")));
  for (const [queue, depth] of Object.entries(overview.queues)) {
    depthTable.append(el("tr", {}, el("td", {}, queue),
                         el("td", {}, String(depth.visible)),
                         el("td", {}, String(depth.inflight)),
                         el("td", {}, String(depth.dead))));
  }
  root.append(el("h3", {}, `Queues (facts: ${overview.facts}, patients: ${overview.patients}, open QA: ${overview.open_qa})`),
              depthTable);

  root.append(el("h2", {}, "Governance"));
  try {
    const [{ users }, { protocols }, { projects }] = await Promise.all([
      state.client.users(), state.client.protocols(), state.client.projects()]);
    const govTable = el("table", { class: "grid" });
    govTable.append(el("tr", {}, el("th", {}, "user"), el("th", {}, "roles"),
                       el("th", {}, "protocols")));
    for (const u of users) {
      govTable.append(el("tr", {}, el("td", {}, `${u.display_name} (${u.user_id})`),
                         el("td", {}, u.roles.join(", ")),
                         el("td", {}, u.protocol_ids.join(", "))));
    }
    root.append(govTable,
                el("p", {}, `${protocols.length} protocol(s), ${projects.length} project(s)`));
  } catch (err) {
    root.append(notice("err", "admin listing requires the admin role"));
  }

  const audit = await state.client.audit({});
  const badge = el("span", {
    class: audit.chain_verified ? "badge ok" : "badge err", id: "audit-badge",
  }, audit.chain_verified ? "chain verified" : `chain BROKEN @${audit.first_bad_entry}`);
  const auditTable = el("table", { class: "grid", id: "audit-table" });
  auditTable.append(el("tr", {}, ...["id", "actor", "action", "resource", "outcome"].map(
    (h) => el("th", {}, h))));
  for (const entry of audit.entries.slice(-25)) {
    auditTable.append(el("tr", { class: entry.outcome },
                         el("td", {}, String(entry.entry_id)), el("td", {}, entry.actor),
                         el("td", {}, entry.action), el("td", {}, entry.resource_id),
                         el("td", {}, entry.outcome)));
  }
  root.append(el("h3", {}, "Audit log ", badge), auditTable);
  return root;
}

// ---------------------------------------------------------------------------
// shell
// ---------------------------------------------------------------------------

export async function mountApp(root: HTMLElement, baseUrl: string,
                               token: string): Promise<void> {
  const client = new Client(baseUrl, token);
  const [{ concepts }, { operations }, { projects }] = await Promise.all([
    client.concepts(), client.operations(), client.projects()]);
  const state: AppState = { client, concepts, operations, projects, variables: [] };

  const tabs = ["builder", "datasets", "qa", "admin"] as const;
  let active: (typeof tabs)[number] = "builder";
  const nav = el("nav", {});
  const body = el("main", {});

  const render = async () => {
    nav.replaceChildren(...tabs.map((tab) => {
      const button = el("button", { class: tab === active ? "active" : "" }, tab);
      button.onclick = () => { active = tab; void render(); };
      return button;
    }));
    if (active === "builder") body.replaceChildren(variableBuilderView(state, () => void render()));
    else if (active === "datasets") body.replaceChildren(await datasetDashboardView(state));
    else if (active === "qa") body.replaceChildren(await qaQueueView(state, () => void render()));
    else body.replaceChildren(await adminView(state));
  };
  root.replaceChildren(el("header", {}, el("h1", {}, "factline workbench"), nav), body);
  await render();
}

declare global {
  interface Window { FACTLINE_BASE?: string; FACTLINE_TOKEN?: string }
}

if (typeof document !== "undefined" && document.getElementById("app")) {
  const base = window.FACTLINE_BASE ?? "http://127.0.0.1:8765";
  const token = window.FACTLINE_TOKEN
    ?? new URLSearchParams(location.search).get("token") ?? "demo-admin-token";
  void mountApp(document.getElementById("app")!, base, token);
}
