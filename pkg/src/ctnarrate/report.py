"""Report analysis: organ matching, finding extraction, lay explanations.

All language work goes through the ``LlmProvider`` contract so the pipeline
runs against a remote chat-completion endpoint or a recorded-response mock
interchangeably. Prompt templates are shipped as versioned data files with
literal ``{name}`` placeholders (plain substring substitution, so JSON
braces inside the templates survive untouched).
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import time
from dataclasses import dataclass, replace
from importlib import resources

from .errors import (
    MalformedProviderOutput,
    ProviderFailure,
    UnknownOrganLabel,
)

log = logging.getLogger(__name__)

PROMPT_VERSION = "v1"
EXPLANATION_CHAR_BUDGET = 800
DEFAULT_API_KEY_ENV = "CTNARRATE_LLM_API_KEY"


def _data_text(relative: str) -> str:
    return resources.files("ctnarrate").joinpath(f"data/{relative}").read_text(
        encoding="utf-8"
    )


def load_prompt(name: str, version: str = PROMPT_VERSION) -> str:
    return _data_text(f"prompts/{name}.{version}.txt")


def render_prompt(template: str, **values: str) -> str:
    """Fill ``{name}`` placeholders by literal substitution."""
    out = template
    for key, value in values.items():
        out = out.replace("{" + key + "}", value)
    return out


class OrganVocabulary:
    """The fixed 201-entry anatomical vocabulary."""

    EXPECTED_SIZE = 201

    def __init__(self, labels):
        cleaned = [" ".join(label.split()) for label in labels]
        if len(cleaned) != self.EXPECTED_SIZE:
            raise ValueError(
                f"vocabulary must have exactly {self.EXPECTED_SIZE} labels, "
                f"got {len(cleaned)}"
            )
        if len(set(cleaned)) != len(cleaned):
            raise ValueError("vocabulary labels must be unique")
        self.labels: tuple[str, ...] = tuple(cleaned)
        self._index = frozenset(cleaned)

    def __contains__(self, label: str) -> bool:
        return label in self._index

    def __len__(self) -> int:
        return len(self.labels)

    def __iter__(self):
        return iter(self.labels)

    def as_prompt_block(self) -> str:
        """The list formatted the way the organ-matching prompt embeds it."""
        return ", ".join(f"'{label}'" for label in self.labels)


_DEFAULT_VOCAB: OrganVocabulary | None = None


def default_vocabulary() -> OrganVocabulary:
    global _DEFAULT_VOCAB
    if _DEFAULT_VOCAB is None:
        lines = [ln.strip() for ln in _data_text("organs.txt").splitlines()]
        _DEFAULT_VOCAB = OrganVocabulary([ln for ln in lines if ln])
    return _DEFAULT_VOCAB


@dataclass(frozen=True)
class ExplanationTriple:
    """The three narration texts for one finding, in presentation order."""

    abnormality_explanation: str
    input_scan_appearance: str
    normal_scan_appearance: str

    KEYS = ("abnormality_explanation", "input_scan_appearance",
            "normal_scan_appearance")

    def __post_init__(self):
        for key in self.KEYS:
            value = getattr(self, key)
            if not isinstance(value, str) or not value.strip():
                raise ValueError(f"explanation field {key} must be non-empty")
            if len(value) > EXPLANATION_CHAR_BUDGET:
                raise ValueError(
                    f"explanation field {key} exceeds {EXPLANATION_CHAR_BUDGET} chars"
                )

    def for_phase(self, phase: int) -> str:
        return getattr(self, self.KEYS[phase - 1])

    def as_dict(self) -> dict:
        return {key: getattr(self, key) for key in self.KEYS}


@dataclass(frozen=True)
class Finding:
    """One positive report finding with its organ matches and explanation."""

    phrase: str
    organs: tuple[str, ...]
    rank: int
    explanation: ExplanationTriple

    def __post_init__(self):
        if not self.phrase.strip():
            raise ValueError("finding phrase must be non-empty")
        organs = tuple(self.organs)
        if not organs:
            raise ValueError("finding must name at least one organ")
        vocab = default_vocabulary()
        for organ in organs:
            if organ not in vocab:
                raise UnknownOrganLabel(organ)
        if self.rank < 1:
            raise ValueError("rank must be a positive integer")
        object.__setattr__(self, "organs", organs)

    def as_dict(self) -> dict:
        return {
            "phrase": self.phrase,
            "organs": list(self.organs),
            "rank": self.rank,
            "explanation": self.explanation.as_dict(),
        }


# --- providers ---------------------------------------------------------------


def prompt_key(prompt: str) -> str:
    """Fixture key for a prompt: sha256 hex of its UTF-8 bytes."""
    return hashlib.sha256(prompt.encode("utf-8")).hexdigest()


class RecordedLlmProvider:
    """Deterministic mock: a JSON map from prompt hash to response text."""

    def __init__(self, responses: dict[str, str]):
        self.responses = dict(responses)

    @classmethod
    def from_file(cls, path) -> "RecordedLlmProvider":
        with open(path, encoding="utf-8") as fh:
            return cls(json.load(fh))

    def record(self, prompt: str, response: str) -> None:
        self.responses[prompt_key(prompt)] = response

    def complete(self, prompt: str) -> str:
        key = prompt_key(prompt)
        if key not in self.responses:
            raise ProviderFailure(
                f"recorded mock has no response for prompt hash {key[:12]}..."
            )
        return self.responses[key]


class HttpLlmProvider:
    """Chat-completion-style HTTP client.

    Request JSON: ``{"model": ..., "messages": [{"role": "user",
    "content": prompt}]}``; response JSON: ``{"text": ...}``. The API key
    is read from the environment, never from config files.
    """

    def __init__(self, base_url: str, model: str = "default",
                 api_key_env: str = DEFAULT_API_KEY_ENV,
                 timeout: float = 60.0, retries: int = 2,
                 backoff: float = 1.0):
        self.base_url = base_url
        self.model = model
        self.api_key_env = api_key_env
        self.timeout = timeout
        self.retries = retries
        self.backoff = backoff

    def complete(self, prompt: str) -> str:
        import requests

        headers = {}
        key = os.environ.get(self.api_key_env, "")
        if key:
            headers["Authorization"] = f"Bearer {key}"
        body = {
            "model": self.model,
            "messages": [{"role": "user", "content": prompt}],
        }
        last_error = None
        for attempt in range(self.retries + 1):
            if attempt:
                time.sleep(self.backoff * 2 ** (attempt - 1))
            try:
                resp = requests.post(
                    self.base_url, json=body, headers=headers, timeout=self.timeout
                )
                if resp.status_code != 200:
                    last_error = f"HTTP {resp.status_code}: {resp.text[:200]}"
                    continue
                payload = resp.json()
                if "text" not in payload:
                    raise MalformedProviderOutput(
                        "LLM response JSON lacks the 'text' field"
                    )
                return payload["text"]
            except MalformedProviderOutput:
                raise
            except Exception as exc:  # transport-level
                last_error = str(exc)
        raise ProviderFailure(f"LLM endpoint failed after retries: {last_error}")


# --- parsing helpers ---------------------------------------------------------

_FENCE_RE = re.compile(r"^\s*```[a-zA-Z0-9_-]*\s*\n(.*?)\n?\s*```\s*$", re.DOTALL)


def parse_provider_json(text: str):
    """Strict JSON parse, then one code-fence-stripping fallback."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        pass
    fence = _FENCE_RE.match(text)
    if fence:
        try:
            return json.loads(fence.group(1))
        except json.JSONDecodeError:
            pass
    raise MalformedProviderOutput(f"provider output is not JSON: {text[:120]!r}")


def _validate_organs(labels, vocab: OrganVocabulary) -> list[str]:
    seen = []
    for label in labels:
        cleaned = " ".join(str(label).split())
        if cleaned not in vocab:
            raise UnknownOrganLabel(cleaned)
        if cleaned not in seen:
            seen.append(cleaned)
    return seen


# --- operations --------------------------------------------------------------


def match_organs(report_text: str, vocab: OrganVocabulary, llm) -> list[str]:
    """Organs with positive findings, validated against the vocabulary.

    Returns [] when the provider answers "none".
    """
    if not report_text.strip():
        raise ValueError("report text must be non-empty")
    prompt = render_prompt(
        load_prompt("match_organs"),
        organs=vocab.as_prompt_block(),
        report=report_text,
    )
    answer = llm.complete(prompt).strip()
    if answer.rstrip(".").strip().lower() == "none":
        return []
    labels = [part for part in (p.strip() for p in answer.split(",")) if part]
    return _validate_organs(labels, vocab)


def extract_findings(report_text: str, llm,
                     vocab: OrganVocabulary | None = None) -> list[tuple[str, list[str]]]:
    """Positive-finding phrases with matched organs.

    Every returned phrase is a verbatim substring of the report; anything
    else from the provider is MalformedProviderOutput.
    """
    if not report_text.strip():
        raise ValueError("report text must be non-empty")
    vocab = vocab or default_vocabulary()
    prompt = render_prompt(
        load_prompt("extract_findings"),
        organs=vocab.as_prompt_block(),
        report=report_text,
    )
    payload = parse_provider_json(llm.complete(prompt))
    if not isinstance(payload, list):
        raise MalformedProviderOutput("finding extraction must return a JSON array")
    findings = []
    for item in payload:
        if not isinstance(item, dict) or "phrase" not in item or "organs" not in item:
            raise MalformedProviderOutput(
                f"finding entry lacks phrase/organs keys: {item!r}"
            )
        phrase = str(item["phrase"])
        if phrase not in report_text:
            raise MalformedProviderOutput(
                f"extracted phrase is not verbatim report text: {phrase!r}"
            )
        organs = _validate_organs(item["organs"], vocab)
        if not organs:
            raise MalformedProviderOutput(f"no organs for phrase {phrase!r}")
        findings.append((phrase, organs))
    return findings


def explain_finding(phrase: str, llm) -> ExplanationTriple:
    """Three-part lay explanation for one finding phrase."""
    if not phrase.strip():
        raise ValueError("finding phrase must be non-empty")
    prompt = render_prompt(load_prompt("explain_finding"), phrase=phrase)
    payload = parse_provider_json(llm.complete(prompt))
    if not isinstance(payload, dict):
        raise MalformedProviderOutput("explanation must be a JSON object")
    missing = [key for key in ExplanationTriple.KEYS if key not in payload]
    if missing:
        raise MalformedProviderOutput(f"explanation JSON missing keys: {missing}")
    try:
        return ExplanationTriple(**{k: payload[k] for k in ExplanationTriple.KEYS})
    except ValueError as exc:
        raise MalformedProviderOutput(str(exc)) from exc


def rank_findings(findings: list[Finding], llm) -> list[Finding]:
    """Re-rank by clinical significance; falls back to input order.

    The fallback (provider failure or unusable output) is logged, never
    silent, and the result is always a permutation with ranks 1..n.
    """
    if not findings:
        raise ValueError("rank_findings needs at least one finding")
    if len(findings) == 1:
        return [replace(findings[0], rank=1)]
    listing = "\n".join(
        f"{i + 1}. {f.phrase}" for i, f in enumerate(findings)
    )
    prompt = render_prompt(load_prompt("rank_findings"), findings=listing)
    order = None
    try:
        payload = parse_provider_json(llm.complete(prompt))
        if (
            isinstance(payload, list)
            and sorted(payload) == list(range(1, len(findings) + 1))
        ):
            order = [int(i) - 1 for i in payload]
        else:
            log.warning("ranking output %r is not a permutation; keeping input order",
                        payload)
    except (ProviderFailure, MalformedProviderOutput) as exc:
        log.warning("ranking provider failed (%s); keeping input order", exc)
    if order is None:
        order = list(range(len(findings)))
    return [
        replace(findings[idx], rank=position + 1)
        for position, idx in enumerate(order)
    ]


def analyze_report(report_text: str, llm,
                   vocab: OrganVocabulary | None = None) -> list[Finding]:
    """Full report stage: extract, explain, rank.

    Deterministic given a deterministic provider: same report in, same
    findings out.
    """
    vocab = vocab or default_vocabulary()
    raw = extract_findings(report_text, llm, vocab)
    findings = [
        Finding(
            phrase=phrase,
            organs=tuple(organs),
            rank=i + 1,
            explanation=explain_finding(phrase, llm),
        )
        for i, (phrase, organs) in enumerate(raw)
    ]
    if not findings:
        return []
    return rank_findings(findings, llm)
