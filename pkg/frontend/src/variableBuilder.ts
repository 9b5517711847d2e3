// Form-driven construction of variable definitions and dataset specs.
// Client-side validation mirrors the server's rules so that anything this
// module emits is accepted verbatim by POST /datasets.

import type { ConceptInfo, DatasetSpec, MappingChoice, Timeframe, VariableDef } from "./types.js";

export interface BuilderInputs {
  name: string;
  concept?: string;
  derivedFrom?: string[];
  operation: string;
  value?: string | null;
  timeframe?: Timeframe;
  constraints?: string[];
  mapping?: MappingChoice;
}

const DERIVED_OPS = new Set([
  "Identity", "Exists", "Count", "Min", "Max", "Mean", "Like", "Right-Like", "Left-Like",
]);

export function buildVariable(inputs: BuilderInputs, operations: string[],
                              concepts: ConceptInfo[]): VariableDef {
  const problems = validateVariable(inputs, operations, concepts);
  if (problems.length) throw new Error(problems.join("; "));
  const source = inputs.concept !== undefined && inputs.concept !== ""
    ? { concept: inputs.concept }
    : { variables: inputs.derivedFrom ?? [] };
  return {
    name: inputs.name,
    data_source: source,
    operation: inputs.operation,
    value: inputs.value ?? null,
    timeframe: inputs.timeframe ?? { kind: "always" },
    constraints: inputs.constraints ?? [],
    mapping: inputs.mapping ?? { policy: "default" },
  };
}

export function validateVariable(inputs: BuilderInputs, operations: string[],
                                 concepts: ConceptInfo[]): string[] {
  const problems: string[] = [];
  if (!inputs.name || !/^[A-Za-z0-9_.-]+$/.test(inputs.name)) {
    problems.push("variable name must be a non-empty identifier");
  }
  if (!operations.includes(inputs.operation)) {
    problems.push(`unknown operation ${inputs.operation}`);
  }
  const hasConcept = inputs.concept !== undefined && inputs.concept !== "";
  const hasDerived = (inputs.derivedFrom ?? []).length > 0;
  if (!hasConcept && !hasDerived) {
    problems.push("pick a concept or derive from other variables");
  }
  if (hasConcept && !concepts.some((c) => c.name === inputs.concept)) {
    problems.push(`unknown concept ${inputs.concept}`);
  }
  if (hasDerived && !DERIVED_OPS.has(inputs.operation)) {
    problems.push(`${inputs.operation} cannot take derived input`);
  }
  const tf = inputs.timeframe;
  if (tf?.kind === "absolute-range" && !tf.range) {
    problems.push("absolute-range timeframe needs a range");
  }
  if (tf?.kind === "anchor-relative" && !tf.anchor) {
    problems.push("anchor-relative timeframe needs an anchor concept");
  }
  if (inputs.mapping?.policy === "user-defined") {
    const entries = inputs.mapping.entries ?? [];
    if (!entries.length) problems.push("user-defined mapping needs entries");
    const texts = new Set(entries.map(([t]) => t));
    const numbers = new Set(entries.map(([, n]) => n));
    if (texts.size !== entries.length || numbers.size !== entries.length) {
      problems.push("mapping entries must be a bijection");
    }
  }
  return problems;
}

/** Constraint/derivation cycles are blocked before anything reaches the API. */
export function findCycle(variables: VariableDef[]): string[] | null {
  const graph = new Map<string, string[]>();
  for (const v of variables) {
    graph.set(v.name, [...v.constraints, ...(v.data_source.variables ?? [])]);
  }
  const state = new Map<string, number>();
  const stack: string[] = [];
  const visit = (node: string): string[] | null => {
    if (state.get(node) === 1) return [...stack, node];
    if (state.get(node) === 2 || !graph.has(node)) return null;
    state.set(node, 1);
    stack.push(node);
    for (const dep of graph.get(node) ?? []) {
      const cycle = visit(dep);
      if (cycle) return cycle;
    }
    stack.pop();
    state.set(node, 2);
    return null;
  };
  for (const name of graph.keys()) {
    const cycle = visit(name);
    if (cycle) return cycle;
  }
  return null;
}

export function buildDatasetSpec(name: string, projectId: string,
                                 variables: VariableDef[],
                                 indexEvent: string | null = null,
                                 patients: string[] | null = null): DatasetSpec {
  if (!name) throw new Error("dataset name required");
  if (!projectId) throw new Error("project required");
  if (!variables.length) throw new Error("add at least one variable");
  const names = new Set(variables.map((v) => v.name));
  if (names.size !== variables.length) throw new Error("variable names must be unique");
  for (const v of variables) {
    for (const ref of [...v.constraints, ...(v.data_source.variables ?? [])]) {
      if (!names.has(ref)) throw new Error(`${v.name} references unknown variable ${ref}`);
    }
  }
  const cycle = findCycle(variables);
  if (cycle) throw new Error(`constraint cycle: ${cycle.join(" -> ")}`);
  return {
    name,
    project_id: projectId,
    variables,
    cohort: patients ? { patients } : { all: true },
    index_event: indexEvent,
  };
}
