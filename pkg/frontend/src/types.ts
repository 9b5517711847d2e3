// DTOs mirroring the REST API payloads.

export interface ConceptInfo {
  name: string;
  value_kind: "number" | "boolean" | "text-choice" | "timestamp" | "series-ref";
  unit: string | null;
  choices: string[];
  expected_range: [number, number] | null;
}

export interface Timeframe {
  kind: "always" | "absolute-range" | "anchor-relative";
  range?: [number, number];
  anchor?: { concept: string; before_ms: number; after_ms: number };
}

export interface MappingChoice {
  policy: "default" | "common-ordering" | "alphabetical" | "user-defined";
  entries?: [string, number][];
}

export interface VariableDef {
  name: string;
  data_source: { concept?: string; table?: string; field?: string; variables?: string[] };
  operation: string;
  value: string | null;
  timeframe: Timeframe;
  constraints: string[];
  mapping: MappingChoice;
}

export interface DatasetSpec {
  name: string;
  project_id: string;
  variables: VariableDef[];
  cohort: { all?: boolean; patients?: string[] };
  index_event: string | null;
}

export interface DatasetManifest {
  dataset_id: string;
  version: number;
  project_id: string;
  name: string;
  state: "pending" | "complete" | "failed";
  row_count: number | null;
  snapshot_id: string;
  translator_versions: Record<string, number>;
  created_by: string;
  created_at: number;
  files: { human: string | null; numeric: string | null };
  qa_report: { ok: boolean; mismatches: string[] } | null;
  spec: DatasetSpec;
}

export interface QaRow {
  qa_id: string;
  pathway: string;
  source_record_id: string;
  translator_id: string | null;
  translator_version: number | null;
  status_message: string;
  state: "open" | "mitigated" | "dismissed";
  opened_at: number;
  signer: string | null;
  signed_at: number | null;
  payload: string | null;
}

export interface BatchStatus {
  batch_id: string;
  status: "staged" | "processing" | "complete" | "partial-failed";
  staged_rows: number;
  total_blocks: number;
  done_blocks: number;
  dead_blocks: number;
}

export interface QueueDepth {
  visible: number;
  inflight: number;
  dead: number;
}

export interface Overview {
  facts: number;
  patients: number;
  open_qa: number;
  queues: Record<string, QueueDepth>;
}

export interface AuditEntry {
  entry_id: number;
  actor: string;
  action: string;
  resource_id: string;
  outcome: "allowed" | "denied" | "error";
  at: number;
}

export interface AuditPage {
  entries: AuditEntry[];
  chain_verified: boolean;
  first_bad_entry: number | null;
}

export interface AnalysisInfo {
  analysis_id: string;
  kind: string;
  files: Record<string, string>;
  created_at: number;
}
