"""Teacher pipeline: CoT prompt rendering, the teacher client (live HTTP or
offline mock), response parsing, and instruction-dataset validation.

The ten prompt templates are pinned byte-for-byte in prompt_templates.json;
render_prompt never rewrites them, it only toggles the leading caption
sentence. Mock mode is a canned-response directory keyed by
{sha256(image)}/{template_id}.txt and never fabricates text on a miss.
"""

from __future__ import annotations

import base64
import hashlib
import json
import re
import time
from dataclasses import dataclass, field, asdict
from importlib import resources
from pathlib import Path

from .imaging import CATEGORIES
from .tokenizer import tokenize_words

SCHEMA_VERSION = 1
MAX_IMAGE_BYTES = 20 * 1024 * 1024


class TeacherError(Exception):
    pass


class TemplateError(TeacherError):
    pass


class ParseError(TeacherError):
    pass


class MockMissError(TeacherError):
    """No canned response for this (image, template) pair."""


class TeacherAuthError(TeacherError):
    pass


class TeacherTransportError(TeacherError):
    pass


# ---------------------------------------------------------------------------
# prompt templates


def _load_templates() -> dict[int, dict]:
    raw = resources.files("nanovlm").joinpath("prompt_templates.json").read_bytes()
    data = json.loads(raw.decode("utf-8"))
    return {int(k): v for k, v in data.items()}


def template_file_bytes() -> bytes:
    return resources.files("nanovlm").joinpath("prompt_templates.json").read_bytes()


TEMPLATES = _load_templates()

_QUESTION_SPLIT = re.compile(r"(?<=\?)\.?(?:\s+|$)")
_BULLET_SPLIT = re.compile(r"(?<=\.)\s+-\s+")


def render_prompt(template_id: int, category: str | None = None,
                  include_caption: bool = False) -> str:
    """Template body verbatim, optionally preceded by the category caption.

    With include_caption the prompt starts with one sentence naming the
    ground-truth category; without it (the zero-shot classification setting)
    the body stands alone.
    """
    if template_id not in TEMPLATES:
        raise TemplateError(f"unknown template id {template_id}; valid ids are 1..10")
    body = TEMPLATES[template_id]["body"]
    if include_caption:
        if not category:
            raise TemplateError("include_caption needs a category")
        return f"This SEM image shows {category.replace('_', ' ')}. " + body
    return body


def split_subquestions(template_id: int) -> list[str]:
    """Deterministic sub-question segmentation of a template body.

    Chunks end at '?' (with optional trailing '.'); sentence-plus-bullet runs
    without a '?' are further split at '. - '. Leading bullet dashes are
    stripped. This is the segmentation both the parser and the synthetic
    teacher agree on.
    """
    if template_id not in TEMPLATES:
        raise TemplateError(f"unknown template id {template_id}; valid ids are 1..10")
    body = TEMPLATES[template_id]["body"]
    title_prefix = re.match(r"\*\*[^*]+\*\*\s*-+\s*", body)
    text = body[title_prefix.end():] if title_prefix else body
    questions: list[str] = []
    for chunk in _QUESTION_SPLIT.split(text):
        for piece in _BULLET_SPLIT.split(chunk):
            piece = piece.strip().lstrip("-").strip()
            if any(c.isalpha() for c in piece):
                questions.append(piece)
    return questions


# ---------------------------------------------------------------------------
# records


@dataclass
class InstructionRecord:
    image: str
    category: str
    template_id: int
    instruction: str
    answer: str
    provenance: str = "synthetic"   # teacher-model id | synthetic | human

    def to_dict(self) -> dict:
        d = asdict(self)
        d["schema_version"] = SCHEMA_VERSION
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "InstructionRecord":
        version = d.pop("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise TeacherError(f"unsupported record schema version {version}")
        return cls(**d)


def write_records(path, records) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_dict(), ensure_ascii=False) + "\n")
            fh.flush()


def read_records(path) -> list[InstructionRecord]:
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                records.append(InstructionRecord.from_dict(json.loads(line)))
    return records


# ---------------------------------------------------------------------------
# teacher clients


@dataclass
class TeacherRequest:
    """Sampling parameters sent to the teacher; values pinned unless overridden."""
    model_id: str = "gpt-4-vision"
    temperature: float = 0.25
    top_p: float = 0.1
    max_tokens: int = 3500


def build_payload(req: TeacherRequest, prompt: str, image_bytes: bytes) -> dict:
    """The JSON body of a live teacher call (kept pure so tests stay offline)."""
    encoded = base64.b64encode(image_bytes).decode("ascii")
    return {
        "model": req.model_id,
        "temperature": req.temperature,
        "top_p": req.top_p,
        "max_tokens": req.max_tokens,
        "messages": [{
            "role": "user",
            "content": [
                {"type": "text", "text": prompt},
                {"type": "image_url",
                 "image_url": {"url": f"data:image/png;base64,{encoded}"}},
            ],
        }],
    }


def image_key(image_bytes: bytes) -> str:
    return hashlib.sha256(image_bytes).hexdigest()


class MockTeacherClient:
    """Canned responses from {root}/{sha256(image)}/{template_id}.txt."""

    def __init__(self, root):
        self.root = Path(root)

    def fetch(self, image_bytes: bytes, prompt: str, req: TeacherRequest,
              template_id: int, category: str | None = None) -> str:
        path = self.root / image_key(image_bytes) / f"{template_id}.txt"
        if not path.exists():
            raise MockMissError(f"no canned response at {path}")
        return path.read_text(encoding="utf-8")

    def store(self, image_bytes: bytes, template_id: int, text: str) -> Path:
        path = self.root / image_key(image_bytes) / f"{template_id}.txt"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding="utf-8")
        return path


class LiveTeacherClient:
    """HTTP JSON client with exponential backoff; only used with --live."""

    def __init__(self, endpoint: str, api_key: str, timeout: float = 60.0,
                 post=None, sleep=time.sleep, max_attempts: int = 3):
        self.endpoint = endpoint
        self.api_key = api_key
        self.timeout = timeout
        self._post = post
        self._sleep = sleep
        self.max_attempts = max_attempts

    def _do_post(self, payload: dict):
        if self._post is None:
            import requests
            self._post = requests.post
        return self._post(self.endpoint, json=payload, timeout=self.timeout,
                          headers={"Authorization": f"Bearer {self.api_key}"})

    def fetch(self, image_bytes: bytes, prompt: str, req: TeacherRequest,
              template_id: int, category: str | None = None) -> str:
        payload = build_payload(req, prompt, image_bytes)
        last_error = None
        for attempt in range(self.max_attempts):
            try:
                response = self._do_post(payload)
            except Exception as exc:
                last_error = exc
                self._sleep(0.5 * 2 ** attempt)
                continue
            status = getattr(response, "status_code", 0)
            if status in (401, 403):
                raise TeacherAuthError(f"teacher endpoint rejected credentials ({status})")
            if status == 200:
                body = response.json()
                return body["choices"][0]["message"]["content"]
            last_error = TeacherTransportError(f"teacher returned status {status}")
            self._sleep(0.5 * 2 ** attempt)
        raise TeacherTransportError(f"teacher unreachable after {self.max_attempts} "
                                    f"attempts: {last_error}")


class RefusingClient:
    """Test stub proving a code path never reaches for the network."""

    def fetch(self, *args, **kwargs):
        raise AssertionError("network access attempted in offline mode")


def request_teacher(client, image_bytes: bytes, prompt: str, req: TeacherRequest,
                    template_id: int, category: str | None = None) -> str:
    """One teacher round trip via whichever client is configured."""
    if not prompt:
        raise TeacherError("empty prompt")
    if len(image_bytes) > MAX_IMAGE_BYTES:
        raise TeacherError(f"image of {len(image_bytes)} bytes exceeds "
                           f"{MAX_IMAGE_BYTES}-byte limit")
    return client.fetch(image_bytes, prompt, req, template_id, category=category)


# ---------------------------------------------------------------------------
# synthetic rule-following teacher (offline dataset fabrication)

_ANSWER_BANKS = {
    "biological": ["rounded cellular lobes", "soft overlapping membranes", "organic blob clusters"],
    "tips": ["a sharply tapered cone", "a single pointed probe", "a narrow apex structure"],
    "fibres": ["long interwoven strands", "criss-crossing thin filaments", "tangled fibrous threads"],
    "porous_sponge": ["interconnected open pores", "a spongy pitted matrix", "foam-like cavities"],
    "films": ["a smooth uniform coating", "an even featureless layer", "a flat continuous film"],
    "patterned_surface": ["a periodic square lattice", "regular repeating cells", "an ordered grid array"],
    "nanowires": ["aligned parallel wires", "dense vertical rods", "oriented slender wires"],
    "particles": ["scattered round grains", "dispersed spherical particles", "isolated small beads"],
    "mems": ["rectangular machined blocks", "right-angled device terraces", "stacked planar stages"],
    "powder": ["fine granular speckle", "loose powdery agglomerates", "dense tiny grains"],
}


class SyntheticTeacherClient:
    """Deterministic stand-in teacher that answers every sub-question.

    Responses follow the exact layout parse_qa expects (each sub-question
    echoed, then its answer), so parse -> records round-trips losslessly.
    """

    def __init__(self, seed: int = 0):
        self.seed = seed

    def fetch(self, image_bytes: bytes, prompt: str, req: TeacherRequest,
              template_id: int, category: str | None = None) -> str:
        import numpy as np
        category = category or "particles"
        digest = int.from_bytes(hashlib.sha256(image_bytes).digest()[:4], "big")
        rng = np.random.default_rng([self.seed, digest, template_id])
        bank = _ANSWER_BANKS[category]
        parts = []
        for question in split_subquestions(template_id):
            phrase = bank[int(rng.integers(len(bank)))]
            parts.append(f"{question} The image shows {phrase} of the "
                         f"{category.replace('_', ' ')} kind.")
        return " ".join(parts)


# ---------------------------------------------------------------------------
# parsing teacher output


def parse_qa(raw: str, template_id: int) -> tuple[list[tuple[str, str]], int]:
    """Split a teacher response on the template's sub-questions.

    Each sub-question found verbatim in the text is paired with the span up
    to the next found sub-question. Returns (pairs, dropped_count) where
    dropped counts sub-questions that were missing or had empty answers.
    Raises ParseError when nothing can be extracted.
    """
    if not raw or not raw.strip():
        raise ParseError("empty teacher response")
    questions = split_subquestions(template_id)
    found = []
    for q in questions:
        pos = raw.find(q)
        if pos >= 0:
            found.append((pos, q))
    found.sort()
    pairs = []
    dropped = len(questions) - len(found)
    for i, (pos, q) in enumerate(found):
        start = pos + len(q)
        end = found[i + 1][0] if i + 1 < len(found) else len(raw)
        answer = raw[start:end].strip()
        if answer:
            pairs.append((q, answer))
        else:
            dropped += 1
    if not pairs:
        raise ParseError(f"no question/answer pairs recovered from response: {raw[:200]!r}")
    return pairs, dropped


def generate_records(manifest_entries, images_root, template_ids, client,
                     req: TeacherRequest | None = None, include_caption: bool = True,
                     provenance: str | None = None) -> tuple[list[InstructionRecord], int]:
    """Teacher round trips over a fixture manifest -> instruction records."""
    req = req or TeacherRequest()
    root = Path(images_root)
    records: list[InstructionRecord] = []
    warnings = 0
    if provenance is None:
        provenance = "synthetic" if isinstance(client, SyntheticTeacherClient) else req.model_id
    for entry in manifest_entries:
        image_bytes = (root / entry["path"]).read_bytes()
        for tid in template_ids:
            prompt = render_prompt(tid, entry["category"], include_caption)
            raw = request_teacher(client, image_bytes, prompt, req, tid,
                                  category=entry["category"])
            pairs, dropped = parse_qa(raw, tid)
            warnings += dropped
            for question, answer in pairs:
                records.append(InstructionRecord(
                    image=entry["path"], category=entry["category"], template_id=tid,
                    instruction=question, answer=answer, provenance=provenance))
    return records, warnings


# ---------------------------------------------------------------------------
# dataset validation


@dataclass
class ValidationReport:
    violations: list[str] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)
    per_category: dict = field(default_factory=dict)
    per_template: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return not self.violations

    def to_json(self) -> str:
        return json.dumps({"ok": self.ok, "violations": self.violations,
                           "warnings": self.warnings,
                           "per_category": self.per_category,
                           "per_template": self.per_template}, indent=2)


def validate_dataset(records, images_root=".", max_answer_tokens: int = 96) -> ValidationReport:
    """Schema, file-existence, duplicate, and length checks over a dataset."""
    report = ValidationReport()
    root = Path(images_root)
    seen: set[tuple[str, str]] = set()
    for i, rec in enumerate(records):
        where = f"record {i}"
        if not rec.instruction.strip():
            report.violations.append(f"{where}: empty instruction")
        if not rec.answer.strip():
            report.violations.append(f"{where}: empty answer")
        if rec.category not in CATEGORIES:
            report.violations.append(f"{where}: unknown category {rec.category!r}")
        if not (root / rec.image).exists():
            report.violations.append(f"{where}: missing image file {rec.image}")
        if not isinstance(rec.template_id, int) or not 1 <= rec.template_id <= 10:
            report.violations.append(f"{where}: template_id {rec.template_id!r} out of range")
        key = (rec.image, rec.instruction)
        if key in seen:
            report.violations.append(f"{where}: duplicate (image, instruction) pair {key}")
        seen.add(key)
        n_tokens = len(tokenize_words(rec.answer))
        if n_tokens > max_answer_tokens:
            report.violations.append(
                f"{where}: answer of {n_tokens} tokens exceeds bound {max_answer_tokens}")
        report.per_category[rec.category] = report.per_category.get(rec.category, 0) + 1
        report.per_template[rec.template_id] = report.per_template.get(rec.template_id, 0) + 1
    return report
