"""JSON-lines scenario ingestion.

Two row shapes are accepted under the same field names
``{id, context, atomic_facts, question, options, answer}``:

* symbolic rows: ``context``/``atomic_facts`` are ``[key, value]`` pairs,
  ``question`` is ``{"relevant_keys": [...], "rule": "sum_mod"}`` and
  ``answer`` is an option id;
* free-text rows (atomic-facts case files): facts are sentences, options are a
  list or a letter-keyed mapping, ``answer`` is a letter or the option text.
  Each sentence becomes its own fact key (value 0); the id -> text mapping is
  kept on ``Scenario.labels`` so the encoding is reversible.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

from ..env import Scenario, ScenarioError

log = logging.getLogger(__name__)

REQUIRED = ("id", "context", "atomic_facts", "question", "options", "answer")


@dataclass
class IngestReport:
    scenarios: list[Scenario] = field(default_factory=list)
    errors: list[tuple[int, str]] = field(default_factory=list)

    @property
    def skipped(self) -> int:
        return len(self.errors)


def _is_text_row(row: dict) -> bool:
    facts = list(row["atomic_facts"]) + (list(row["context"]) if isinstance(row["context"], list) else [])
    return any(isinstance(f, str) for f in facts) or isinstance(row["context"], str)


def _symbolic(row: dict) -> Scenario:
    facts, context = {}, []
    for pair in list(row["context"]) + list(row["atomic_facts"]):
        k, v = (int(x) for x in pair)
        if k in facts and facts[k] != v:
            raise ScenarioError(f"fact key {k} given two values")
        facts[k] = v
    context = [int(p[0]) for p in row["context"]]
    q = row["question"]
    if not isinstance(q, dict) or "relevant_keys" not in q:
        raise ScenarioError("symbolic question must be an object with relevant_keys")
    options = [int(o) for o in row["options"]]
    return Scenario(id=str(row["id"]), facts=facts, context_keys=tuple(context),
                    relevant_keys=tuple(int(k) for k in q["relevant_keys"]), options=tuple(options),
                    correct_option=int(row["answer"]), answer_rule=q.get("rule", "sum_mod"))


def _free_text(row: dict) -> Scenario:
    context = row["context"]
    context = [context] if isinstance(context, str) else list(context)
    texts: list[str] = []
    for sentence in context + list(row["atomic_facts"]):
        sentence = str(sentence).strip()
        if sentence and sentence not in texts:
            texts.append(sentence)
    if not texts:
        raise ScenarioError("no facts")
    ids = {t: i for i, t in enumerate(texts)}
    context_keys = [ids[str(s).strip()] for s in context if str(s).strip()]
    relevant = [ids[str(s).strip()] for s in row["atomic_facts"] if str(s).strip()]
    opts = row["options"]
    if isinstance(opts, dict):
        letters, option_texts = list(opts.keys()), [str(v) for v in opts.values()]
    else:
        option_texts = [str(v) for v in opts]
        letters = [chr(ord("A") + i) for i in range(len(option_texts))]
    answer = str(row["answer"]).strip()
    if answer in letters:
        correct = letters.index(answer)
    elif answer in option_texts:
        correct = option_texts.index(answer)
    else:
        raise ScenarioError(f"answer {answer!r} matches no option")
    labels = {"facts": {i: t for t, i in ids.items()}, "question": str(row["question"]),
              "options": dict(zip(letters, option_texts))}
    return Scenario(id=str(row["id"]), facts={i: 0 for i in ids.values()}, context_keys=tuple(context_keys),
                    relevant_keys=tuple(relevant), options=tuple(range(len(option_texts))),
                    correct_option=correct, answer_rule="given", labels=labels)


def load_scenarios(path) -> IngestReport:
    report = IngestReport()
    seen: set[str] = set()
    lines = Path(path).read_text().splitlines()
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
            if not isinstance(row, dict):
                raise ScenarioError("row is not a JSON object")
            missing = [f for f in REQUIRED if f not in row]
            if missing:
                raise ScenarioError(f"missing fields {missing}")
            scenario = _free_text(row) if _is_text_row(row) else _symbolic(row)
            if scenario.id in seen:
                raise ScenarioError(f"duplicate id {scenario.id!r}")
        except (ScenarioError, ValueError, TypeError, KeyError) as exc:
            report.errors.append((lineno, str(exc)))
            continue
        seen.add(scenario.id)
        report.scenarios.append(scenario)
    if not report.scenarios and not report.errors:
        log.warning("no scenarios in %s", path)
    if report.errors:
        log.warning("skipped %d bad line(s) in %s: %s", report.skipped, path,
                    "; ".join(f"line {n}: {m}" for n, m in report.errors[:5]))
    return report


def ingest_scenarios(path) -> list[Scenario]:
    return load_scenarios(path).scenarios


def write_scenarios(scenarios, path) -> None:
    with open(path, "w") as fh:
        for s in scenarios:
            fh.write(json.dumps(s.to_json(), sort_keys=True) + "\n")
