"""Grounded-conversation dataset construction with an external VLM.

Per image: drop highly overlapped annotated regions (keeping 3-10), place
numbered markers at the survivors' centers, assemble a context-rich request
(region descriptions, image captions, Q&A pairs, few-shot exemplars), send
it to a VLM client, and post-filter the responses so only conversations in
the uniform grounded format survive. The bundled mock client answers
deterministically, so the whole pipeline runs offline and byte-reproducibly;
a generic HTTP client covers real endpoints.
"""

from __future__ import annotations

import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Protocol, Sequence

from .geometry import BoundingBox, iou
from .grammar import MarkupError, parse, serialize

log = logging.getLogger(__name__)

DEFAULT_IOU_THRESHOLD = 0.5
DEFAULT_MAX_REGIONS = 10
MIN_REGIONS = 3

SYSTEM_INSTRUCTION = (
    "You will see an image where regions of interest carry bright numeric markers. "
    "Write a multi-turn conversation about the image. Start every user turn with "
    "'User: ' and every assistant turn with 'Assistant: '. Whenever the assistant "
    "mentions a marked region, wrap the mention as <p>phrase</p> <roi><rN></roi> "
    "where N is the region's marker number. Do not reference unmarked content by number."
)

DEFAULT_FEWSHOT = (
    "User: [grounding] Describe what is happening in this image.\n"
    "Assistant: <p>A woman</p> <roi><r2></roi> is handing <p>a paper cup</p> <roi><r3></roi> "
    "to <p>a man in a blue jacket</p> <roi><r1></roi>.",
    "User: What object is on the table?\n"
    "Assistant: On the table there is <p>a silver laptop</p> <roi><r4></roi> next to "
    "<p>a potted plant</p> <roi><r5></roi>.",
)


@dataclass(frozen=True)
class RegionAnnotation:
    box: BoundingBox
    description: str

    def __post_init__(self) -> None:
        if not self.description:
            raise ValueError("region description must be nonempty")


@dataclass(frozen=True)
class FilteredRegions:
    regions: tuple[RegionAnnotation, ...]
    truncated: bool
    sparse: bool


@dataclass(frozen=True)
class Marker:
    label: int
    center: tuple[float, float]
    box: BoundingBox


@dataclass(frozen=True)
class MarkedImageSpec:
    image_id: str
    markers: tuple[Marker, ...]
    ambiguous: bool = False

    def labels(self) -> tuple[int, ...]:
        return tuple(m.label for m in self.markers)


def filter_overlaps(
    regions: Sequence[RegionAnnotation],
    iou_threshold: float = DEFAULT_IOU_THRESHOLD,
    max_regions: int = DEFAULT_MAX_REGIONS,
) -> FilteredRegions:
    """Greedy keep-first de-overlap, capped at ``max_regions`` survivors.

    A region is dropped when its IoU with any already-kept region exceeds
    the threshold. Fewer than 3 survivors flags the image as sparse
    (excluded from generation by default).
    """
    if not (0.0 < iou_threshold < 1.0):
        raise ValueError(f"iou_threshold must be in (0, 1), got {iou_threshold}")
    kept: list[RegionAnnotation] = []
    truncated = False
    for region in regions:
        if any(iou(region.box, other.box) > iou_threshold for other in kept):
            continue
        if len(kept) >= max_regions:
            truncated = True
            break
        kept.append(region)
    return FilteredRegions(tuple(kept), truncated, len(kept) < MIN_REGIONS)


def place_markers(regions: Sequence[RegionAnnotation], image_id: str = "") -> MarkedImageSpec:
    """Assign labels 1..m in order; each marker sits at its box midpoint.

    Coincident centers are allowed but flag the spec as ambiguous (the
    textual region descriptions resolve which marker is which).
    """
    if not (1 <= len(regions) <= DEFAULT_MAX_REGIONS):
        raise ValueError(f"need 1..{DEFAULT_MAX_REGIONS} regions, got {len(regions)}")
    markers = tuple(
        Marker(label, region.box.center, region.box) for label, region in enumerate(regions, start=1)
    )
    centers = [m.center for m in markers]
    ambiguous = len(set(centers)) < len(centers)
    if ambiguous:
        log.warning("ambiguous markers: coincident centers in image %s", image_id)
    return MarkedImageSpec(image_id, markers, ambiguous)


@dataclass(frozen=True)
class VlmRequest:
    image_id: str
    marked_image: MarkedImageSpec
    region_descriptions: dict[int, str]
    image_descriptions: tuple[str, ...] = ()
    qa_pairs: tuple[tuple[str, str], ...] = ()
    fewshot: tuple[str, ...] = DEFAULT_FEWSHOT
    instruction: str = "Generate a grounded conversation about this image."
    seed: int = 0

    def render_text(self) -> str:
        """Byte-stable request document."""
        lines = [SYSTEM_INSTRUCTION, ""]
        if self.fewshot:
            lines.append("== Context examples ==")
            for example in self.fewshot:
                lines.append(example)
                lines.append("")
        lines.append("== Region descriptions ==")
        for marker in self.marked_image.markers:
            lines.append(f"{marker.label}: {self.region_descriptions[marker.label]}")
        if self.image_descriptions:
            lines.append("== Image descriptions ==")
            lines.extend(f"- {d}" for d in self.image_descriptions)
        if self.qa_pairs:
            lines.append("== Q&A pairs ==")
            lines.extend(f"Q: {q} A: {a}" for q, a in self.qa_pairs)
        lines.append("== Image ==")
        lines.append(f"[marked image {self.image_id}: {len(self.marked_image.markers)} markers]")
        lines.append("")
        lines.append(self.instruction)
        return "\n".join(lines)


def assemble_request(
    spec: MarkedImageSpec,
    context: dict[str, Any],
    fewshot: Sequence[str] = DEFAULT_FEWSHOT,
    seed: int = 0,
) -> VlmRequest:
    """Build the request document for one marked image.

    ``context`` carries ``region_descriptions`` (label -> text, must cover
    every marker), plus optional ``image_descriptions`` and ``qa_pairs``.
    """
    descriptions = {int(k): str(v) for k, v in context.get("region_descriptions", {}).items()}
    for marker in spec.markers:
        if marker.label not in descriptions:
            raise ValueError(f"uncovered marker: no description for label {marker.label}")
    return VlmRequest(
        image_id=spec.image_id,
        marked_image=spec,
        region_descriptions=descriptions,
        image_descriptions=tuple(str(d) for d in context.get("image_descriptions", ())),
        qa_pairs=tuple((str(q), str(a)) for q, a in context.get("qa_pairs", ())),
        fewshot=tuple(fewshot),
        seed=seed,
    )


@dataclass(frozen=True)
class Turn:
    role: str  # "user" | "assistant"
    text: str


@dataclass(frozen=True)
class ConversationRecord:
    image_id: str
    turns: tuple[Turn, ...]
    referenced_labels: tuple[int, ...]
    valid: bool
    error: str | None = None

    def to_json_dict(self) -> dict[str, Any]:
        return {
            "image_id": self.image_id,
            "turns": [{"role": t.role, "text": t.text} for t in self.turns],
            "referenced_labels": list(self.referenced_labels),
            "valid": self.valid,
            "error": self.error,
        }


def parse_conversation(text: str) -> list[Turn]:
    """Split raw VLM output into alternating user/assistant turns."""
    turns: list[Turn] = []
    role: str | None = None
    buffer: list[str] = []

    def flush() -> None:
        if role is not None:
            turns.append(Turn(role, "\n".join(buffer).strip()))

    for line in text.splitlines():
        if line.startswith("User:"):
            flush()
            role, buffer = "user", [line[len("User:") :].strip()]
        elif line.startswith("Assistant:"):
            flush()
            role, buffer = "assistant", [line[len("Assistant:") :].strip()]
        elif role is None:
            if line.strip():
                raise ValueError("text before first turn marker")
        else:
            buffer.append(line)
    flush()

    if not turns:
        raise ValueError("no turns found")
    for i, turn in enumerate(turns):
        expected = "user" if i % 2 == 0 else "assistant"
        if turn.role != expected:
            raise ValueError(f"turn {i + 1} should be {expected}, got {turn.role}")
        if not turn.text:
            raise ValueError(f"turn {i + 1} is empty")
    return turns


def postfilter(raw_responses: Sequence[str], specs: Sequence[MarkedImageSpec]) -> list[ConversationRecord]:
    """Keep only conversations in the uniform grounded format.

    Every turn must parse under the grounded grammar (lenient mode) with
    referents read as marker labels, every referent must name an existing
    marker, and at least one grounded span must appear. Rejection is data:
    the record stays in the output with ``valid=False`` and the first error.
    """
    if len(raw_responses) != len(specs):
        raise ValueError(f"{len(raw_responses)} responses but {len(specs)} specs")
    records: list[ConversationRecord] = []
    for text, spec in zip(raw_responses, specs):
        m = len(spec.markers)
        try:
            turns = parse_conversation(text)
            canonical: list[Turn] = []
            labels: set[int] = set()
            span_count = 0
            for turn in turns:
                parsed = parse(turn.text, m, lenient=True)
                labels.update(parsed.referents())
                span_count += len(parsed.spans())
                canonical.append(Turn(turn.role, serialize(parsed)))
            if span_count == 0:
                raise ValueError("no grounding: conversation has no grounded span")
            records.append(ConversationRecord(spec.image_id, tuple(canonical), tuple(sorted(labels)), True))
        except (MarkupError, ValueError) as exc:
            records.append(ConversationRecord(spec.image_id, (), (), False, str(exc)))
    return records


def rewrite_referents(text: str, mapping: dict[int, int]) -> str:
    """Rewrite marker-label referents to registry proxy indices.

    Used when accepted conversations are replayed against a ProxyRegistry:
    label k becomes proxy mapping[k]. A referent with no mapping is an error.
    """
    parsed = parse(text, 10**9, lenient=True)
    segments = []
    for seg in parsed.segments:
        if isinstance(seg, str):
            segments.append(seg)
        else:
            try:
                referents = tuple(mapping[r] for r in seg.referents)
            except KeyError as exc:
                raise ValueError(f"no proxy mapping for label {exc.args[0]}") from exc
            segments.append(type(seg)(seg.phrase, referents))
    return serialize(type(parsed)(tuple(segments)))


class VlmClient(Protocol):
    def complete(self, request: VlmRequest) -> str: ...


class MockVlmClient:
    """Offline stand-in: echoes a templated grounded conversation.

    The reply grounds every marker using its region description, so it
    always passes the post-filter for well-formed descriptions and is a
    pure function of the request.
    """

    def complete(self, request: VlmRequest) -> str:
        markers = request.marked_image.markers
        mentions = [
            f"<p>{request.region_descriptions[m.label]}</p> <roi><r{m.label}></roi>" for m in markers
        ]
        if len(mentions) == 1:
            listing = mentions[0]
        elif len(mentions) == 2:
            listing = f"{mentions[0]} and {mentions[1]}"
        else:
            listing = ", ".join(mentions[:-1]) + f", and {mentions[-1]}"
        top_left = min(markers, key=lambda m: (m.center[0] + m.center[1], m.label))
        closest = (
            f"<p>{request.region_descriptions[top_left.label]}</p> <roi><r{top_left.label}></roi>"
        )
        return (
            "User: [grounding] Please briefly describe the image content.\n"
            f"Assistant: The image shows {listing}.\n"
            "User: Which marked region is closest to the top-left corner?\n"
            f"Assistant: That would be {closest}."
        )

    def complete_batch(self, requests: Sequence[VlmRequest]) -> list[str]:
        return [self.complete(r) for r in requests]


class HttpVlmClient:
    """Generic JSON-over-HTTP client configured by environment variables.

    Posts {"model", "prompt", "image_id", "markers"} to the endpoint and
    expects {"text": ...} back. Supports bounded concurrent requests with
    per-request timeout and simple retry; batch results keep input order.
    """

    def __init__(
        self,
        endpoint: str,
        model: str,
        api_key: str = "",
        timeout: float = 60.0,
        retries: int = 2,
        max_in_flight: int = 4,
    ):
        self.endpoint = endpoint
        self.model = model
        self.api_key = api_key
        self.timeout = timeout
        self.retries = retries
        self.max_in_flight = max_in_flight

    @classmethod
    def from_env(cls) -> "HttpVlmClient":
        endpoint = os.environ.get("VLM_ENDPOINT", "")
        if not endpoint:
            raise ValueError("VLM_ENDPOINT is not set; use the mock client for offline runs")
        return cls(endpoint, os.environ.get("VLM_MODEL", ""), os.environ.get("VLM_API_KEY", ""))

    def complete(self, request: VlmRequest) -> str:
        import requests

        payload = {
            "model": self.model,
            "prompt": request.render_text(),
            "image_id": request.image_id,
            "markers": [
                {"label": m.label, "center": list(m.center), "box": m.box.to_list()}
                for m in request.marked_image.markers
            ],
        }
        headers = {"Authorization": f"Bearer {self.api_key}"} if self.api_key else {}
        last_error: Exception | None = None
        for attempt in range(self.retries + 1):
            try:
                response = requests.post(self.endpoint, json=payload, headers=headers, timeout=self.timeout)
                response.raise_for_status()
                return str(response.json()["text"])
            except Exception as exc:  # noqa: BLE001 - retried, then re-raised
                last_error = exc
                if attempt < self.retries:
                    time.sleep(min(2.0**attempt, 10.0))
        raise RuntimeError(f"VLM request failed after {self.retries + 1} attempts: {last_error}")

    def complete_batch(self, requests_: Sequence[VlmRequest]) -> list[str]:
        with ThreadPoolExecutor(max_workers=self.max_in_flight) as pool:
            return list(pool.map(self.complete, requests_))


def load_region_annotations(doc: Any) -> list[tuple[str, list[RegionAnnotation]]]:
    """Read VG-style region annotations.

    Accepts either a bare list or {"images": [...]}; each entry has an
    image id and regions with x/y/width/height plus a phrase.
    """
    entries = doc.get("images", doc) if isinstance(doc, dict) else doc
    out: list[tuple[str, list[RegionAnnotation]]] = []
    for pos, entry in enumerate(entries):
        image_id = entry.get("image_id", entry.get("id"))
        if image_id is None:
            raise ValueError(f"image #{pos}: missing image id")
        regions = []
        for rpos, region in enumerate(entry.get("regions", [])):
            try:
                x, y = float(region["x"]), float(region["y"])
                w, h = float(region["width"]), float(region["height"])
                phrase = str(region["phrase"])
            except (KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"image {image_id} region #{rpos}: {exc}") from exc
            regions.append(RegionAnnotation(BoundingBox(x, y, x + w, y + h), phrase))
        out.append((str(image_id), regions))
    return out


@dataclass
class GenerationResult:
    records: list[ConversationRecord]
    skipped_sparse: list[str] = field(default_factory=list)


def generate_conversations(
    annotated: Sequence[tuple[str, Sequence[RegionAnnotation]]],
    client: VlmClient,
    context_by_image: dict[str, dict[str, Any]] | None = None,
    iou_threshold: float = DEFAULT_IOU_THRESHOLD,
    max_regions: int = DEFAULT_MAX_REGIONS,
    seed: int = 0,
    include_sparse: bool = False,
) -> GenerationResult:
    """Run the full construction pipeline over annotated images."""
    context_by_image = context_by_image or {}
    specs: list[MarkedImageSpec] = []
    requests_: list[VlmRequest] = []
    skipped: list[str] = []
    for image_id, regions in annotated:
        filtered = filter_overlaps(regions, iou_threshold, max_regions)
        if filtered.sparse and not include_sparse:
            log.info("sparse image %s: %d regions after de-overlap; skipped", image_id, len(filtered.regions))
            skipped.append(image_id)
            continue
        spec = place_markers(filtered.regions, image_id)
        extra = context_by_image.get(image_id, {})
        context = {
            "region_descriptions": {
                m.label: filtered.regions[m.label - 1].description for m in spec.markers
            },
            "image_descriptions": extra.get("captions", ()),
            "qa_pairs": [(qa["question"], qa["answer"]) for qa in extra.get("qa", [])],
        }
        specs.append(spec)
        requests_.append(assemble_request(spec, context, seed=seed))

    if hasattr(client, "complete_batch"):
        responses = client.complete_batch(requests_)
    else:
        responses = [client.complete(r) for r in requests_]
    return GenerationResult(postfilter(responses, specs), skipped)
