"""Concept interpretations: name, generated explanation, graph context, one string.

Each concept gets a four-part textual interpretation
(name / explanation / predecessor names / successor names) rendered into a
single line that the text encoder consumes. Explanations come from a
provider: either a remote generation endpoint or a local fixture file.
Results are cached as json-lines keyed by (name, neighbor lists, template
version) so reruns are free and offline.
"""

from __future__ import annotations

import json
import logging
import os
import time
from dataclasses import dataclass, asdict

import requests

logger = logging.getLogger(__name__)

TEMPLATE_VERSION = 2

DEFAULT_ENDPOINT = "https://api.openai.com/v1/chat/completions"
DEFAULT_MODEL = "gpt-4o-mini"
API_KEY_VAR = "LLM_API_KEY"

# dense graphs would otherwise blow up the prompt; highest-degree neighbors
# carry the most disambiguating context
PROMPT_NEIGHBOR_LIMIT = 10

DISAMBIGUATION_NOTE = "Do not mention that a list of related concepts was provided."


class ProviderError(RuntimeError):
    """Explanation provider failed or is misconfigured."""


class CacheError(ValueError):
    """Interpretation cache file is malformed or stale."""


def build_prompt(name, predecessors=(), successors=()) -> str:
    """Deterministic explanation request for one concept.

    Neighbor names anchor the concept in its curriculum ("Table" the SQL
    object, not the furniture); when both lists are empty the context
    clause is dropped entirely and the prompt is just the bare request.
    """
    if not name:
        raise ValueError("concept name must be nonempty")
    predecessors = tuple(predecessors)
    successors = tuple(successors)
    if predecessors and successors:
        context = (
            f" as taught after {', '.join(predecessors)}"
            f" and before {', '.join(successors)}"
        )
    elif predecessors:
        context = f" as taught after {', '.join(predecessors)}"
    elif successors:
        context = f" as taught before {', '.join(successors)}"
    else:
        context = ""
    prompt = (
        "You are an expert curriculum designer. "
        f"Explain the concept '{name}'{context}, in 2-4 sentences, for a student."
    )
    if context:
        prompt += " " + DISAMBIGUATION_NOTE
    return prompt


@dataclass(frozen=True)
class ConceptInterpretation:
    id: int
    name: str
    explanation: str
    predecessors: tuple[str, ...]
    successors: tuple[str, ...]
    template_version: int = TEMPLATE_VERSION
    prompt_truncated: bool = False

    def render(self) -> str:
        """Single-line serialization consumed by the text encoder.

        Empty neighbor lists render as the literal word `none` so the
        encoder always sees all four fields.
        """
        pred = ", ".join(self.predecessors) if self.predecessors else "none"
        succ = ", ".join(self.successors) if self.successors else "none"
        return (
            f"Name: {self.name}; Explanation: {self.explanation}; "
            f"Predecessors: {pred}; Successors: {succ}"
        )


class FixtureProvider:
    """Explanations from a local json file {concept_name: explanation}."""

    def __init__(self, path):
        with open(path, "r", encoding="utf-8") as fh:
            table = json.load(fh)
        if not isinstance(table, dict):
            raise ProviderError(f"{path}: fixture must be a json object")
        self.path = path
        self.table = {str(k): str(v) for k, v in table.items()}
        self.calls = 0

    def explain(self, name, predecessors=(), successors=()) -> str:
        self.calls += 1
        if name not in self.table:
            raise ProviderError(f"{self.path}: no fixture explanation for concept {name!r}")
        return self.table[name]


class RemoteProvider:
    """Explanations from a chat-completions style HTTP endpoint.

    The API key is read from the LLM_API_KEY environment variable at
    construction. Transient failures are retried 3 times with exponential
    backoff; a concept whose request never succeeds gets an empty
    explanation and a logged warning so the pipeline can proceed.
    """

    ATTEMPTS = 3

    def __init__(self, endpoint=DEFAULT_ENDPOINT, model=DEFAULT_MODEL, timeout=30.0,
                 backoff=0.5):
        key = os.environ.get(API_KEY_VAR)
        if not key:
            raise ProviderError(
                f"remote provider needs the {API_KEY_VAR} environment variable"
            )
        self.endpoint = endpoint
        self.model = model
        self.timeout = timeout
        self.backoff = backoff
        self.calls = 0
        self._key = key

    def _request(self, prompt) -> str:
        resp = requests.post(
            self.endpoint,
            json={"model": self.model, "messages": [{"role": "user", "content": prompt}]},
            headers={"Authorization": f"Bearer {self._key}"},
            timeout=self.timeout,
        )
        resp.raise_for_status()
        text = resp.json()["choices"][0]["message"]["content"]
        return " ".join(str(text).split())

    def explain(self, name, predecessors=(), successors=()) -> str:
        self.calls += 1
        prompt = build_prompt(name, predecessors, successors)
        for attempt in range(self.ATTEMPTS):
            try:
                text = self._request(prompt)
                if text:
                    return text
                raise ProviderError(f"empty response for {name!r}")
            except (requests.RequestException, KeyError, IndexError, ValueError,
                    ProviderError) as exc:
                if attempt + 1 < self.ATTEMPTS:
                    time.sleep(self.backoff * 2 ** attempt)
                else:
                    logger.warning(
                        "explanation for %r failed after %d attempts (%s); "
                        "continuing with an empty explanation", name, self.ATTEMPTS, exc,
                    )
        return ""


def _prompt_neighbors(ids, graph, id_to_name):
    """Neighbor names for the prompt: at most PROMPT_NEIGHBOR_LIMIT, by degree.

    Degree = in + out edge count; ties broken by ascending id, and the kept
    subset is re-sorted by id so the prompt is stable.
    """
    if len(ids) <= PROMPT_NEIGHBOR_LIMIT:
        return tuple(id_to_name[i] for i in ids), False
    ranked = sorted(
        ids, key=lambda i: (-(len(graph.predecessors(i)) + len(graph.successors(i))), i)
    )
    kept = sorted(ranked[:PROMPT_NEIGHBOR_LIMIT])
    return tuple(id_to_name[i] for i in kept), True


def build_interpretations(graph, name_to_id, provider, cached=None):
    """Assemble one interpretation per concept, reusing cache hits.

    `cached` maps concept id to a ConceptInterpretation from a previous run;
    an entry is reused only when its name, neighbor lists and template
    version all still match (the explanation depends on all three).
    Neighbor name lists always come from the current graph, not the cache.
    """
    id_to_name = {v: k for k, v in name_to_id.items()}
    if set(id_to_name) != set(graph.nodes):
        raise ValueError("name map and graph disagree on the concept id set")
    cached = cached or {}
    out = []
    for k in sorted(graph.nodes):
        name = id_to_name[k]
        preds = tuple(id_to_name[p] for p in graph.predecessors(k))
        succs = tuple(id_to_name[s] for s in graph.successors(k))
        hit = cached.get(k)
        if (
            hit is not None
            and hit.name == name
            and hit.predecessors == preds
            and hit.successors == succs
            and hit.template_version == TEMPLATE_VERSION
        ):
            explanation = hit.explanation
            truncated = hit.prompt_truncated
        else:
            prompt_preds, cut_p = _prompt_neighbors(graph.predecessors(k), graph, id_to_name)
            prompt_succs, cut_s = _prompt_neighbors(graph.successors(k), graph, id_to_name)
            explanation = provider.explain(name, prompt_preds, prompt_succs)
            truncated = cut_p or cut_s
        out.append(
            ConceptInterpretation(
                id=k,
                name=name,
                explanation=explanation,
                predecessors=preds,
                successors=succs,
                prompt_truncated=truncated,
            )
        )
    return out


def save_cache(interps, path) -> None:
    """Json-lines, one interpretation per line, ascending id."""
    with open(path, "w", encoding="utf-8") as fh:
        for it in sorted(interps, key=lambda x: x.id):
            row = asdict(it)
            row["predecessors"] = list(row["predecessors"])
            row["successors"] = list(row["successors"])
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def load_cache(path) -> dict[int, ConceptInterpretation]:
    out: dict[int, ConceptInterpretation] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                it = ConceptInterpretation(
                    id=int(row["id"]),
                    name=str(row["name"]),
                    explanation=str(row["explanation"]),
                    predecessors=tuple(str(p) for p in row["predecessors"]),
                    successors=tuple(str(s) for s in row["successors"]),
                    template_version=int(row["template_version"]),
                    prompt_truncated=bool(row.get("prompt_truncated", False)),
                )
            except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
                raise CacheError(f"{path} line {lineno}: malformed cache row ({exc})") from exc
            if it.id in out:
                raise CacheError(f"{path} line {lineno}: duplicate cache entry for id {it.id}")
            out[it.id] = it
    return out
