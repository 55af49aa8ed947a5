"""Grounded markup: prompt rendering, response serialization, strict parsing.

The wire format interleaves plain text with grounded spans::

    <p>A dog</p> <roi><r4></roi> is jumping to catch <p>a frisbee</p> <roi><r7></roi> ...

``<p>``/``</p>`` delimit the grounded phrase, ``<roi>``/``</roi>`` enclose
the referenced regions as proxy tokens ``<r1>``, ``<r2>``, ... (decimal,
no padding). Canonical form puts exactly one space between ``</p>`` and
``<roi>`` and nothing between proxy tokens. Prompts place the image
placeholder ``<image>``, one ``<region>`` placeholder per registry entry,
and an optional ``[grounding]`` flag before the instruction. A lenient
parse mode tolerates whitespace variation (used when post-filtering
external model output) but still rejects structural violations.

The full grammar is published in docs/grammar.ebnf.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from .regions import ProxyRegistry
from .rng import make_rng

log = logging.getLogger(__name__)

IMAGE_TOKEN = "<image>"
REGION_TOKEN = "<region>"
GROUNDING_TOKEN = "[grounding]"
PROMPT_PREAMBLE = "Here is an image with region crops from it. Image: <image>. "

# Default visual-token budget: 256 merged image tokens + 100 region tokens.
DEFAULT_VISUAL_BUDGET = 356


class MarkupError(ValueError):
    """Base class for grammar violations."""


class MalformedMarkupError(MarkupError):
    pass


class StrayProxyError(MarkupError):
    pass


class UnknownReferentError(MarkupError):
    pass


@dataclass(frozen=True)
class GroundedSpan:
    phrase: str
    referents: tuple[int, ...]

    def __post_init__(self) -> None:
        if not self.referents:
            raise MalformedMarkupError("grounded span needs at least one referent")
        if any(r < 1 for r in self.referents):
            raise MalformedMarkupError(f"proxy indices start at 1: {self.referents}")


Segment = Union[str, GroundedSpan]


@dataclass(frozen=True)
class GroundedResponse:
    segments: tuple[Segment, ...]

    def __post_init__(self) -> None:
        previous_plain = False
        for seg in self.segments:
            if isinstance(seg, str):
                if seg == "":
                    raise MalformedMarkupError("empty plain segment")
                if previous_plain:
                    raise MalformedMarkupError("adjacent plain segments must be coalesced")
                previous_plain = True
            else:
                previous_plain = False

    def spans(self) -> list[GroundedSpan]:
        return [s for s in self.segments if isinstance(s, GroundedSpan)]

    def referents(self) -> set[int]:
        return {r for s in self.spans() for r in s.referents}


def _registry_size(registry: ProxyRegistry | int) -> int:
    if isinstance(registry, int):
        if registry < 0:
            raise ValueError(f"registry size must be >= 0, got {registry}")
        return registry
    return registry.size


_PROXY_RE = re.compile(r"<r([1-9][0-9]*)>")


def _check_instruction_referents(instruction: str, size: int) -> None:
    for match in _PROXY_RE.finditer(instruction):
        index = int(match.group(1))
        if index > size:
            raise UnknownReferentError(f"unknown referent, {index}, registry size {size}")


def render_prompt(registry: ProxyRegistry | int, instruction: str, grounding: bool) -> str:
    """Render the canonical prompt for a registry and instruction.

    With an empty registry the region clause is omitted entirely. Referring
    mentions inside the instruction (``<ri><region>``) must name proxies
    that exist in the registry.
    """
    size = _registry_size(registry)
    _check_instruction_referents(instruction, size)
    parts = [PROMPT_PREAMBLE]
    if size > 0:
        regions = ", ".join(f"<r{i}>{REGION_TOKEN}" for i in range(1, size + 1))
        parts.append(f"Regions: {regions}. ")
    if grounding:
        parts.append(GROUNDING_TOKEN + " ")
    parts.append(instruction)
    return "".join(parts)


_PROMPT_RE = re.compile(
    r"^Here is an image with region crops from it\. Image: <image>\. "
    r"(?:Regions: ((?:<r[1-9][0-9]*><region>(?:, )?)+)\. )?"
    r"(\[grounding\] )?(.*)$",
    re.DOTALL,
)


def parse_prompt(text: str) -> tuple[int, bool, str]:
    """Recover (registry size, grounding flag, instruction) from a prompt.

    A ``[grounding] `` immediately after the region clause is always
    attributed to the flag, so an instruction that itself starts with the
    token parses back with the flag set.
    """
    match = _PROMPT_RE.match(text)
    if match is None:
        raise MalformedMarkupError("not a canonical prompt")
    region_list, grounding, instruction = match.groups()
    size = 0
    if region_list is not None:
        indices = [int(m.group(1)) for m in _PROXY_RE.finditer(region_list)]
        if indices != list(range(1, len(indices) + 1)):
            raise MalformedMarkupError(f"region list indices not contiguous from 1: {indices}")
        size = len(indices)
    return size, grounding is not None, instruction


# Instruction templates, one tuple of variants per task. Placeholders in
# braces are substituted verbatim by apply_template.
TEMPLATES: dict[str, tuple[str, ...]] = {
    "image_caption": (
        "What is this photo about?",
        "Describe the following image.",
        "Analyze the image in a comprehensive and detailed manner.",
    ),
    "region_caption": (
        "What is <region>?",
        "Please briefly describe <region>.",
        "Give a concise description of <region>.",
    ),
    "rec": (
        "Locate <p>{expression}</p> in the image.",
        "Which region matches <p>{expression}</p>?",
        "Identify the region that corresponds to <p>{expression}</p>.",
    ),
    "multi_ground": (
        "Locate all <p>{object class}</p> in this image.",
        "Find out all instances of <p>{object class}</p> in the image.",
        "Detect and list each <p>{object class}</p> that appears in the picture.",
    ),
    "grounded_caption": (
        "[grounding] Give me a short description of the image.",
        "[grounding] Succinctly summarize what you see in the image.",
        "[grounding] Please summarize the content of this image in brief.",
    ),
    "grounded_chat": ("[grounding] {instructions}.",),
}

_PLACEHOLDER_RE = re.compile(r"\{([^{}]+)\}")


def fill_template(template: str, args: dict[str, str]) -> str:
    """Substitute every ``{placeholder}`` in a template verbatim."""
    out = template
    for key, value in args.items():
        out = out.replace("{" + key + "}", value)
    missing = _PLACEHOLDER_RE.findall(out)
    if missing:
        raise ValueError(f"missing placeholder: {missing[0]!r}")
    return out


def apply_template(task: str, args: dict[str, str] | None = None, seed: int = 0) -> str:
    """Seeded uniform choice among a task's template variants, filled in."""
    if task not in TEMPLATES:
        raise ValueError(f"unknown task {task!r}; choose from {sorted(TEMPLATES)}")
    variants = TEMPLATES[task]
    rng = make_rng(seed, "templates", task)
    choice = int(rng.integers(len(variants)))
    return fill_template(variants[choice], args or {})


def serialize(response: GroundedResponse, registry: ProxyRegistry | int | None = None) -> str:
    """Render a response to canonical markup text.

    If a registry (or its size) is given, referents are validated against it.
    """
    if registry is not None:
        size = _registry_size(registry)
        for index in sorted(response.referents()):
            if index > size:
                raise UnknownReferentError(f"unknown referent, {index}, registry size {size}")
    parts: list[str] = []
    for seg in response.segments:
        if isinstance(seg, str):
            parts.append(seg)
        else:
            refs = "".join(f"<r{i}>" for i in seg.referents)
            parts.append(f"<p>{seg.phrase}</p> <roi>{refs}</roi>")
    return "".join(parts)


_TAG_RE = re.compile(r"<p>|</p>|<roi>|</roi>|<r([0-9]+)>")


def parse(text: str, registry: ProxyRegistry | int, lenient: bool = False) -> GroundedResponse:
    """Parse markup text into a GroundedResponse.

    Strict mode (default) accepts only the canonical serialization: exactly
    one space between ``</p>`` and ``<roi>``, no whitespace inside roi
    blocks. Lenient mode tolerates whitespace variation there but still
    rejects structural violations: unmatched or nested tags raise
    MalformedMarkupError, a proxy token outside a roi block raises
    StrayProxyError, and a referent beyond the registry raises
    UnknownReferentError.
    """
    size = _registry_size(registry)
    segments: list[Segment] = []
    plain_buffer: list[str] = []

    def flush_plain() -> None:
        if plain_buffer:
            joined = "".join(plain_buffer)
            plain_buffer.clear()
            if joined:
                segments.append(joined)

    pos = 0
    length = len(text)
    while pos < length:
        match = _TAG_RE.search(text, pos)
        if match is None:
            plain_buffer.append(text[pos:])
            break
        if match.start() > pos:
            plain_buffer.append(text[pos : match.start()])
        tag = match.group(0)
        pos = match.end()

        if tag == "<p>":
            flush_plain()
            close = text.find("</p>", pos)
            if close < 0:
                raise MalformedMarkupError("malformed markup: unclosed <p>")
            phrase = text[pos:close]
            if _TAG_RE.search(phrase):
                raise MalformedMarkupError("malformed markup: tag inside phrase")
            pos = close + len("</p>")
            # Separator between </p> and <roi>: exactly one space in strict
            # mode, any whitespace in lenient mode.
            roi_at = text.find("<roi>", pos)
            if roi_at < 0:
                raise MalformedMarkupError("malformed markup: grounded phrase without <roi> block")
            gap = text[pos:roi_at]
            if lenient:
                if gap.strip() != "":
                    raise MalformedMarkupError("malformed markup: text between </p> and <roi>")
            elif gap != " ":
                raise MalformedMarkupError("malformed markup: expected single space between </p> and <roi>")
            pos = roi_at + len("<roi>")

            referents: list[int] = []
            while True:
                if pos >= length:
                    raise MalformedMarkupError("malformed markup: unterminated <roi> block")
                inner = _TAG_RE.match(text, pos)
                if inner is None:
                    if lenient and text[pos].isspace():
                        pos += 1
                        continue
                    raise MalformedMarkupError("malformed markup: text inside <roi> block")
                token = inner.group(0)
                pos = inner.end()
                if inner.group(1) is not None:
                    referents.append(_checked_referent(inner.group(1), size))
                elif token == "</roi>":
                    break
                else:
                    raise MalformedMarkupError(f"malformed markup: {token} inside <roi> block")
            if not referents:
                raise MalformedMarkupError("malformed markup: empty <roi> block")
            segments.append(GroundedSpan(phrase, tuple(referents)))
        elif match.group(1) is not None:
            raise StrayProxyError(f"stray proxy <r{match.group(1)}> outside <roi> block")
        else:
            raise MalformedMarkupError(f"malformed markup: unexpected {tag}")

    flush_plain()
    return GroundedResponse(tuple(segments))


def _checked_referent(digits: str, size: int) -> int:
    if digits.startswith("0"):
        raise MalformedMarkupError(f"malformed markup: padded proxy index {digits!r}")
    index = int(digits)
    if index > size:
        raise UnknownReferentError(f"unknown referent, {index}, registry size {size}")
    return index


def canonicalize(text: str, registry: ProxyRegistry | int) -> str:
    """Lenient parse followed by canonical serialization."""
    return serialize(parse(text, registry, lenient=True))


@dataclass(frozen=True)
class SequenceElement:
    kind: str  # "text" | "image" | "region"
    text: str = ""
    index: int = 0  # image-token row or region proxy index


class MultimodalSequence:
    """Prompt with placeholders replaced by visual-token references."""

    def __init__(
        self,
        elements: list[SequenceElement],
        image_tokens: np.ndarray,
        registry: ProxyRegistry,
        budget: int = DEFAULT_VISUAL_BUDGET,
    ):
        self.elements = elements
        self.image_tokens = image_tokens
        self.registry = registry
        self.budget = budget

    @property
    def visual_count(self) -> int:
        return int(self.image_tokens.shape[0]) + self.registry.size

    @property
    def over_budget(self) -> bool:
        return self.visual_count > self.budget


def assemble_sequence(
    prompt: str,
    image_tokens: np.ndarray,
    registry: ProxyRegistry,
    budget: int = DEFAULT_VISUAL_BUDGET,
) -> MultimodalSequence:
    """Replace placeholders with visual tokens.

    The prompt must contain exactly one ``<image>`` and as many
    ``<region>`` placeholders as the registry has entries; the i-th
    placeholder takes the i-th region token. Total visual count is
    ``len(image_tokens) + registry.size``; exceeding the budget logs an
    over-budget warning but is not an error.
    """
    image_tokens = np.asarray(image_tokens, dtype=np.float64)
    if image_tokens.ndim != 2:
        raise ValueError(f"image tokens must be (N, dim), got shape {image_tokens.shape}")
    image_count = prompt.count(IMAGE_TOKEN)
    region_count = prompt.count(REGION_TOKEN)
    if image_count != 1:
        raise ValueError(f"placeholder count mismatch: {image_count} <image> placeholders, expected 1")
    if region_count != registry.size:
        raise ValueError(
            f"placeholder count mismatch: {region_count} <region> placeholders for registry of size {registry.size}"
        )

    elements: list[SequenceElement] = []
    region_cursor = 0
    chunks = re.split(r"(<image>|<region>)", prompt)
    for chunk in chunks:
        if chunk == IMAGE_TOKEN:
            for row in range(image_tokens.shape[0]):
                elements.append(SequenceElement("image", index=row))
        elif chunk == REGION_TOKEN:
            region_cursor += 1
            elements.append(SequenceElement("region", index=region_cursor))
        elif chunk:
            elements.append(SequenceElement("text", text=chunk))

    seq = MultimodalSequence(elements, image_tokens, registry, budget)
    if seq.over_budget:
        log.warning("over default budget: %d visual tokens > %d", seq.visual_count, budget)
    return seq
