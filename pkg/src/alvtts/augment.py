"""Multi-dialect text corpus construction by dialect translation.

Sentences are rewritten into a target dialect either by a remote
text-completion endpoint or by an offline word-substitution table, then
assembled into the text-corpus format consumed by the phoneme LM.
"""

from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Protocol, Sequence

import requests

from .corpus import Lexicon, g2p_lookup
from .errors import ConfigError, InputError, OOVError, TranslationError
from .mdplbert import TextItem, save_text_corpus

logger = logging.getLogger(__name__)

DIALECT_PLACEHOLDER = "[target dialect]"
SENTENCE_PLACEHOLDER = "[sentence]"
DEFAULT_TEMPLATE = (
    "Rewrite the following sentences as if they were in "
    "[target dialect]: [sentence]"
)


@dataclass(frozen=True)
class PromptTemplate:
    template: str = DEFAULT_TEMPLATE

    def validate(self) -> None:
        for placeholder in (DIALECT_PLACEHOLDER, SENTENCE_PLACEHOLDER):
            n = self.template.count(placeholder)
            if n != 1:
                raise ConfigError(
                    f"template must contain {placeholder!r} exactly once, found {n}"
                )

    def build(self, sentence: str, target_dialect: str) -> str:
        """Substitute the dialect first, then the sentence, one replacement
        each, so a sentence containing placeholder text passes through
        verbatim."""
        self.validate()
        if not sentence:
            raise InputError("cannot build a prompt for an empty sentence")
        out = self.template.replace(DIALECT_PLACEHOLDER, target_dialect, 1)
        return out.replace(SENTENCE_PLACEHOLDER, sentence, 1)


def build_prompt(
    sentence: str, target_dialect: str, template: PromptTemplate | None = None
) -> str:
    return (template or PromptTemplate()).build(sentence, target_dialect)


class TranslatorBackend(Protocol):
    def translate(self, sentence: str, target_dialect: str) -> str: ...


@dataclass
class RemoteLLM:
    """Text-completion client speaking {model, prompt, max_tokens} -> {text}
    JSON over HTTP. Any transport or response-shape problem raises
    TranslationError; retries live in translate_corpus, not here."""

    endpoint: str
    model: str
    max_tokens: int = 256
    timeout: float = 30.0
    template: PromptTemplate = field(default_factory=PromptTemplate)
    session: requests.Session | None = None

    def _session(self) -> requests.Session:
        if self.session is None:
            self.session = requests.Session()
        return self.session

    def prompt_for(self, sentence: str, target_dialect: str) -> str:
        return self.template.build(sentence, target_dialect)

    def translate(self, sentence: str, target_dialect: str) -> str:
        payload = {
            "model": self.model,
            "prompt": self.prompt_for(sentence, target_dialect),
            "max_tokens": self.max_tokens,
        }
        try:
            response = self._session().post(
                self.endpoint, json=payload, timeout=self.timeout
            )
        except requests.RequestException as exc:
            raise TranslationError(f"request failed: {exc}") from exc
        if response.status_code != 200:
            raise TranslationError(f"endpoint returned HTTP {response.status_code}")
        try:
            text = response.json()["text"]
        except (ValueError, KeyError, TypeError) as exc:
            raise TranslationError(f"malformed response body: {exc}") from exc
        if not isinstance(text, str) or not text.strip():
            raise TranslationError("response carried no translation text")
        return text.strip()


@dataclass(frozen=True)
class RuleBased:
    """Offline per-dialect word substitution. Words absent from the table
    (and dialects without a table) pass through unchanged, so an empty
    table is the identity translator."""

    tables: Mapping[str, Mapping[str, str]] = field(default_factory=dict)

    def translate(self, sentence: str, target_dialect: str) -> str:
        table = self.tables.get(target_dialect, {})
        return " ".join(table.get(w, w) for w in sentence.split())


@dataclass
class TranslationRecord:
    index: int
    original: str
    target_dialect: str
    translated: str | None
    attempts: int
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.translated is not None


def _attempt_item(
    index: int,
    sentence: str,
    target_dialect: str,
    backend: TranslatorBackend,
    max_attempts: int,
    sleep: Callable[[float], None],
) -> tuple[TranslationRecord, list[dict]]:
    prompt = None
    if hasattr(backend, "prompt_for"):
        prompt = backend.prompt_for(sentence, target_dialect)
    audit: list[dict] = []
    for attempt in range(1, max_attempts + 1):
        entry = {
            "index": index,
            "attempt": attempt,
            "target_dialect": target_dialect,
            "sentence": sentence,
            "prompt": prompt,
        }
        try:
            translated = backend.translate(sentence, target_dialect)
        except TranslationError as exc:
            entry["error"] = str(exc)
            audit.append(entry)
            if attempt < max_attempts:
                sleep(float(2 ** (attempt - 1)))
            continue
        entry["response"] = translated
        audit.append(entry)
        record = TranslationRecord(index, sentence, target_dialect, translated, attempt)
        return record, audit
    record = TranslationRecord(
        index, sentence, target_dialect, None, max_attempts, audit[-1]["error"]
    )
    return record, audit


def translate_corpus(
    sentences: Sequence[str],
    target_dialect: str,
    backend: TranslatorBackend,
    max_attempts: int = 3,
    concurrency: int = 1,
    results_path: str | Path | None = None,
    audit_path: str | Path | None = None,
    sleep: Callable[[float], None] = time.sleep,
) -> list[TranslationRecord]:
    """Translate every sentence, preserving input order in the result.

    Per-item failures become error records after max_attempts tries with
    exponential backoff (1s, 2s, 4s, ...); they never abort the batch.
    Completed records are appended to results_path as they finish, so an
    interrupted run keeps its partial output, and every attempt's
    prompt/response lands in the JSON-lines audit log.
    """
    if concurrency < 1:
        raise ConfigError(f"concurrency must be >= 1, got {concurrency}")
    if max_attempts < 1:
        raise ConfigError(f"max_attempts must be >= 1, got {max_attempts}")
    for sentence in sentences:
        if not sentence:
            raise InputError("cannot translate an empty sentence")

    results_file = open(results_path, "w", encoding="utf-8") if results_path else None
    audit_file = open(audit_path, "w", encoding="utf-8") if audit_path else None
    records: list[TranslationRecord | None] = [None] * len(sentences)
    try:
        with ThreadPoolExecutor(max_workers=concurrency) as pool:
            futures = [
                pool.submit(
                    _attempt_item,
                    i,
                    sentence,
                    target_dialect,
                    backend,
                    max_attempts,
                    sleep,
                )
                for i, sentence in enumerate(sentences)
            ]
            for future in futures:
                record, audit = future.result()
                records[record.index] = record
                if audit_file is not None:
                    for entry in audit:
                        audit_file.write(json.dumps(entry, sort_keys=True) + "\n")
                    audit_file.flush()
                if results_file is not None:
                    results_file.write(
                        json.dumps(vars(record), sort_keys=True) + "\n"
                    )
                    results_file.flush()
    finally:
        if results_file is not None:
            results_file.close()
        if audit_file is not None:
            audit_file.close()
    return [r for r in records if r is not None]


def assemble_multidialect_corpus(
    originals: Sequence[TextItem],
    records: Sequence[TranslationRecord],
    lexicon: Lexicon,
    path: str | Path,
) -> tuple[list[TextItem], int]:
    """Write originals plus successful translations as one text corpus.

    Originals keep their source dialect; translations carry the record's
    target dialect with phonemes re-derived by lexicon lookup. Lines that
    go out-of-vocabulary after translation are dropped, warned about, and
    counted. Returns (emitted items, skipped line count).
    """
    items = list(originals)
    skipped = 0
    for record in records:
        if not record.ok:
            continue
        words = tuple(record.translated.split())
        try:
            phonemes = g2p_lookup(words, lexicon)
        except OOVError as exc:
            logger.warning(
                "skipping translated line %d (%s): %s", record.index,
                record.target_dialect, exc,
            )
            skipped += 1
            continue
        items.append(
            TextItem(
                dialect=record.target_dialect, graphemes=words, phonemes=phonemes
            )
        )
    save_text_corpus(items, path)
    return items, skipped
