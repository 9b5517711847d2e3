// REST client: the workbench's only channel to the platform. Every number
// shown in the UI comes from these calls, never from client-side computation.

import type {
  AnalysisInfo,
  AuditPage,
  BatchStatus,
  ConceptInfo,
  DatasetManifest,
  DatasetSpec,
  Overview,
  QaRow,
} from "./types.js";

export class ApiError extends Error {
  constructor(public status: number, public body: string) {
    super(`HTTP ${status}: ${body}`);
  }
}

export class Client {
  constructor(private baseUrl: string, private token: string) {}

  setToken(token: string): void {
    this.token = token;
  }

  private async request(method: string, path: string, body?: unknown,
                        idempotencyKey?: string): Promise<Response> {
    const headers: Record<string, string> = { Authorization: `Bearer ${this.token}` };
    if (body !== undefined) headers["Content-Type"] = "application/json";
    if (idempotencyKey) headers["Idempotency-Key"] = idempotencyKey;
    const response = await fetch(this.baseUrl + path, {
      method,
      headers,
      body: body === undefined ? undefined : JSON.stringify(body),
    });
    if (!response.ok) {
      throw new ApiError(response.status, await response.text());
    }
    return response;
  }

  private async json<T>(method: string, path: string, body?: unknown,
                        idempotencyKey?: string): Promise<T> {
    return (await this.request(method, path, body, idempotencyKey)).json() as Promise<T>;
  }

  // metadata
  health(): Promise<{ status: string }> {
    return this.json("GET", "/health");
  }
  concepts(): Promise<{ concepts: ConceptInfo[] }> {
    return this.json("GET", "/concepts");
  }
  operations(): Promise<{ operations: string[] }> {
    return this.json("GET", "/operations");
  }
  sources(): Promise<{ sources: { source_id: string; patients: string[]; categories: string[] }[] }> {
    return this.json("GET", "/sources");
  }
  overview(): Promise<Overview> {
    return this.json("GET", "/overview");
  }

  // ingestion
  pull(body: { source: string; patient_ids: string[]; categories?: string[] | null;
               project_id: string }): Promise<{ batch_id: string }> {
    return this.json("POST", "/ingest/pull", body);
  }
  batch(batchId: string): Promise<BatchStatus> {
    return this.json("GET", `/ingest/batches/${encodeURIComponent(batchId)}`);
  }

  // datasets
  launchDataset(spec: DatasetSpec, idempotencyKey?: string):
      Promise<{ dataset_id: string; version: number }> {
    return this.json("POST", "/datasets", spec, idempotencyKey);
  }
  datasets(projectId?: string): Promise<{ datasets: DatasetManifest[] }> {
    const suffix = projectId ? `?project_id=${encodeURIComponent(projectId)}` : "";
    return this.json("GET", `/datasets${suffix}`);
  }
  dataset(datasetId: string, version: number): Promise<DatasetManifest> {
    return this.json("GET", `/datasets/${datasetId}/v${version}`);
  }
  async downloadDatasetFile(datasetId: string, version: number,
                            kind: "human" | "numeric"): Promise<string> {
    const response = await this.request(
      "GET", `/datasets/${datasetId}/v${version}/files/${kind}`);
    return response.text();
  }
  analyses(datasetId: string, version: number): Promise<{ analyses: AnalysisInfo[] }> {
    return this.json("GET", `/datasets/${datasetId}/v${version}/analyses`);
  }
  async exportAnalysis(analysisId: string, name: string): Promise<string> {
    const response = await this.request(
      "GET", `/analyses/${encodeURIComponent(analysisId)}/export/${name}`);
    return response.text();
  }
  runTest(datasetId: string, version: number,
          body: { kind: string; variables: string[]; group_by?: string | null }):
      Promise<Record<string, unknown>> {
    return this.json("POST", `/datasets/${datasetId}/v${version}/tests`, body);
  }

  // QA/QC
  qaRows(state?: string): Promise<{ qa_rows: QaRow[] }> {
    const suffix = state ? `?state=${encodeURIComponent(state)}` : "";
    return this.json("GET", `/qa${suffix}`);
  }
  mitigate(qaId: string, correctedPayload: string):
      Promise<{ correction_record_id: string }> {
    return this.json("POST", `/qa/${encodeURIComponent(qaId)}/mitigate`,
                     { corrected_payload: correctedPayload });
  }
  dismiss(qaId: string, reason: string): Promise<{ dismissed: string }> {
    return this.json("POST", `/qa/${encodeURIComponent(qaId)}/dismiss`, { reason });
  }
  translators(): Promise<{ translators: { translator_id: string; version: number;
                                          category: string; halt: boolean }[] }> {
    return this.json("GET", "/translators");
  }
  halt(translatorId: string): Promise<{ halted: string }> {
    return this.json("POST", `/translators/${encodeURIComponent(translatorId)}/halt`);
  }
  resume(translatorId: string): Promise<{ resumed: string }> {
    return this.json("POST", `/translators/${encodeURIComponent(translatorId)}/resume`);
  }

  // admin + audit
  users(): Promise<{ users: { user_id: string; display_name: string; roles: string[];
                              protocol_ids: string[] }[] }> {
    return this.json("GET", "/admin/users");
  }
  protocols(): Promise<{ protocols: { protocol_id: string; title: string;
                                      active: boolean }[] }> {
    return this.json("GET", "/admin/protocols");
  }
  projects(): Promise<{ projects: { project_id: string; protocol_id: string;
                                    name: string }[] }> {
    return this.json("GET", "/admin/projects");
  }
  audit(params: { outcome?: string; actor?: string; after_id?: number } = {}):
      Promise<AuditPage> {
    const query = new URLSearchParams();
    if (params.outcome) query.set("outcome", params.outcome);
    if (params.actor) query.set("actor", params.actor);
    if (params.after_id) query.set("after_id", String(params.after_id));
    const suffix = query.toString() ? `?${query}` : "";
    return this.json("GET", `/audit${suffix}`);
  }
}

const sleep = (ms: number) => new Promise((resolve) => setTimeout(resolve, ms));

/** Poll a dataset until it reaches a terminal state (default 2 s interval). */
export async function pollDataset(client: Client, datasetId: string, version: number,
                                  intervalMs = 2000, timeoutMs = 300_000):
    Promise<DatasetManifest> {
  const deadline = Date.now() + timeoutMs;
  for (;;) {
    const manifest = await client.dataset(datasetId, version);
    if (manifest.state !== "pending") return manifest;
    if (Date.now() > deadline) throw new Error(`dataset ${datasetId} v${version} timed out`);
    await sleep(intervalMs);
  }
}

/** Poll a batch until ingestion completes or partially fails. */
export async function pollBatch(client: Client, batchId: string, intervalMs = 2000,
                                timeoutMs = 300_000): Promise<BatchStatus> {
  const deadline = Date.now() + timeoutMs;
  for (;;) {
    const status = await client.batch(batchId);
    if (status.status === "complete" || status.status === "partial-failed") return status;
    if (Date.now() > deadline) throw new Error(`batch ${batchId} timed out`);
    await sleep(intervalMs);
  }
}

/** Poll until the automatic analysis for a dataset version is stored. */
export async function pollAnalyses(client: Client, datasetId: string, version: number,
                                   intervalMs = 2000, timeoutMs = 120_000):
    Promise<AnalysisInfo[]> {
  const deadline = Date.now() + timeoutMs;
  for (;;) {
    const { analyses } = await client.analyses(datasetId, version);
    if (analyses.length > 0) return analyses;
    if (Date.now() > deadline) throw new Error("analysis never arrived");
    await sleep(intervalMs);
  }
}
