"""Prompt rendering for remote LLM-backed evaluators.

A prompt is the demonstration blocks (one per class, each with its own
expanded ``Note``) followed by the query block.  ``[VAR]`` expands to the
selected vocabulary words joined by single spaces; other ``[NAME]``
placeholders are filled from the demonstration or query fields.
"""
from __future__ import annotations

import json
import re
from pathlib import Path

VAR = "[VAR]"
_PLACEHOLDER = re.compile(r"\[([A-Z][A-Z0-9_]*)\]")

TEMPLATES = {
    "5G": (
        "In 5G network, Whether [WORD1] related to [WORD2]? Some contextual information: [TEXT]. "
        'Respond ONLY with "Yes" or "No". Note: [VAR].'
    ),
    "COLA": 'Is this sentence [SENTENCE1] grammatically correct? Respond ONLY with "Yes" or "No". Note: [VAR].',
    "SST2": (
        "How is the sentiment of the sentence [SENTENCE1]? "
        'Respond ONLY with "Great" or "Terrible". Note: [VAR].'
    ),
    "MRPC": (
        "Whether sentence [SENTENCE1] and sentence [SENTENCE2] are semantically the same? "
        'Respond ONLY with "Yes" or "No". Note: [VAR].'
    ),
    "QQP": (
        "Whether sentence [SENTENCE1] and sentence [SENTENCE2] are paraphrased from each other? "
        'Respond ONLY with "Yes" or "No". Note: [VAR].'
    ),
    "QNLI": (
        "Whether sentence [SENTENCE1] and sentence [SENTENCE2] have semantic entailment relations? "
        'Respond ONLY with "Yes" or "No". Note: [VAR].'
    ),
}


class TemplateError(ValueError):
    pass


def placeholders(template):
    return [name for name in _PLACEHOLDER.findall(template) if name != "VAR"]


def expand_fragment(vocab, tokens):
    return " ".join(vocab[int(t)] for t in tokens)


def fill(template, fields, fragment):
    if VAR not in template:
        raise TemplateError("template has no [VAR] placeholder")

    def sub(match):
        name = match.group(1)
        if name == "VAR":
            return fragment
        if name not in fields:
            raise TemplateError(f"no value for placeholder [{name}]")
        return str(fields[name])

    return _PLACEHOLDER.sub(sub, template)


def _fields(record):
    if isinstance(record, str):
        return {"TEXT": record, "SENTENCE1": record}
    return {k: v for k, v in record.items() if k != "label"}


def render_prompt(template, vocab, assignment, demo_texts=(), query_text=None, n_vocab=None):
    """Render the full in-context prompt for one assignment.

    ``demo_texts[i'][k]`` is a record (dict of placeholder values plus
    ``label``) for candidate ``k`` of class ``i'``; ``query_text`` is the
    query record.  Passing ``n_vocab`` checks the vocabulary size.
    """
    if n_vocab is not None and len(vocab) != n_vocab:
        raise TemplateError(f"vocabulary has {len(vocab)} words, expected {n_vocab}")
    if VAR not in template:
        raise TemplateError("template has no [VAR] placeholder")
    fragment = expand_fragment(vocab, assignment.tokens)
    if query_text is None:
        return fragment if template.strip() == VAR else fill(template, {}, fragment)
    blocks = []
    for slot, k in enumerate(assignment.demos):
        record = demo_texts[slot][k]
        label = record.get("label", "") if isinstance(record, dict) else ""
        blocks.append(f"{fill(template, _fields(record), fragment)}\nAnswer: {label}")
    blocks.append(f"{fill(template, _fields(query_text), fragment)}\nAnswer:")
    return "\n".join(blocks)


def load_demo_corpus(path):
    """Load ``{"demos": [[record, ...] per class], "query": record}`` from JSON."""
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    return data.get("demos", []), data.get("query")
