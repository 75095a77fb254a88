"""
Record types shared by the pipeline stages.
"""

from enum import Enum
from typing import Dict, List, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .errors import UnknownTokenError

# Reserved symbol between lines in flat transcripts; outside any codepoint alphabet
LINE_SEPARATOR = "\n"


def format_codepoint(codepoint: int) -> str:
    return f"U+{codepoint:04X}"


class CharBox(BaseModel):
    """One annotated character: codepoint plus pixel rectangle."""

    model_config = ConfigDict(frozen=True)

    codepoint: int = Field(ge=0, le=0x10FFFF, description="Unicode scalar value")
    x: int = Field(ge=0, description="left edge, pixels")
    y: int = Field(ge=0, description="top edge, pixels")
    w: int = Field(ge=1, description="width, pixels")
    h: int = Field(ge=1, description="height, pixels")

    @property
    def label(self) -> str:
        return format_codepoint(self.codepoint)

    @property
    def right(self) -> int:
        return self.x + self.w

    @property
    def bottom(self) -> int:
        return self.y + self.h

    @property
    def x_center(self) -> float:
        return self.x + self.w / 2.0

    @property
    def y_center(self) -> float:
        return self.y + self.h / 2.0

    def contains(self, px: float, py: float) -> bool:
        """Point-in-box test, edges inclusive."""
        return self.x <= px <= self.right and self.y <= py <= self.bottom

    def corners(self) -> List[Tuple[float, float]]:
        return [
            (float(self.x), float(self.y)),
            (float(self.right), float(self.y)),
            (float(self.x), float(self.bottom)),
            (float(self.right), float(self.bottom)),
        ]


class PageAnnotation(BaseModel):
    """One document image and its character boxes in source order."""

    model_config = ConfigDict(frozen=True)

    image_id: str = Field(min_length=1)
    width: int = Field(ge=1)
    height: int = Field(ge=1)
    boxes: Tuple[CharBox, ...] = ()

    @field_validator("image_id")
    @classmethod
    def _plain_id(cls, value: str) -> str:
        if any(ch in value for ch in "\t\n\r,"):
            raise ValueError(f"image_id {value!r} contains a tab, comma or newline")
        return value

    @model_validator(mode="after")
    def _boxes_inside(self):
        for i, box in enumerate(self.boxes):
            if box.right > self.width or box.bottom > self.height:
                raise ValueError(
                    f"box {i} ({box.label} {box.x},{box.y},{box.w},{box.h}) of page "
                    f"{self.image_id} exceeds image bounds {self.width}x{self.height}"
                )
        return self


class CodepointMap(BaseModel):
    """Codepoint to display-character table."""

    entries: Dict[int, str] = Field(default_factory=dict)

    def char(self, codepoint: int, image_id: Optional[str] = None) -> str:
        try:
            return self.entries[codepoint]
        except KeyError:
            where = f" on page {image_id}" if image_id else ""
            raise UnknownTokenError(
                f"codepoint {format_codepoint(codepoint)}{where} is missing from the codepoint map"
            ) from None

    def inverse(self) -> Dict[str, int]:
        """Display character to codepoint; the lowest codepoint wins on collisions."""
        inv: Dict[str, int] = {}
        for codepoint in sorted(self.entries, reverse=True):
            inv[self.entries[codepoint]] = codepoint
        return inv

    def __len__(self) -> int:
        return len(self.entries)


class DatasetSplit(BaseModel):
    """Train/validation partition of image ids."""

    train: List[str]
    valid: List[str]
    seed: int

    @model_validator(mode="after")
    def _disjoint(self):
        overlap = set(self.train) & set(self.valid)
        if overlap:
            raise ValueError(f"ids in both train and valid: {sorted(overlap)[:5]}")
        return self


class TextLine(BaseModel):
    """A vertical line of characters, members ordered top to bottom."""

    model_config = ConfigDict(frozen=True)

    box_indices: Tuple[int, ...] = Field(min_length=1)
    line_bbox: Tuple[int, int, int, int] = Field(description="x, y, w, h")
    x_center: float

    @property
    def top(self) -> int:
        return self.line_bbox[1]


class PageTranscript(BaseModel):
    """Per-line strings in reading order plus their separator-joined form."""

    model_config = ConfigDict(frozen=True)

    lines: Tuple[str, ...] = ()
    flat: str = ""

    @classmethod
    def from_lines(cls, lines) -> "PageTranscript":
        lines = tuple(lines)
        return cls(lines=lines, flat=LINE_SEPARATOR.join(lines))

    @model_validator(mode="after")
    def _flat_matches(self):
        if self.flat != LINE_SEPARATOR.join(self.lines):
            raise ValueError("flat transcript does not equal the separator-joined lines")
        return self

    @property
    def char_count(self) -> int:
        return sum(len(line) for line in self.lines)


class Provenance(BaseModel):
    """Everything needed to regenerate a derived record."""

    source_id: str
    ops: List[str] = Field(default_factory=list)
    seed: int
    erased_ranks: List[int] = Field(default_factory=list)


class SampleKind(str, Enum):
    MULTILINE_CROP = "multiline_crop"
    FULL_PAGE = "full_page"
    GENERATED = "generated"


class ManifestEntry(BaseModel):
    model_config = ConfigDict(frozen=True)

    sample_id: str
    kind: SampleKind
    image_path: str
    transcript: str


class CurriculumManifest(BaseModel):
    """Samples that make up one curriculum stage."""

    stage: int = Field(ge=1, le=3)
    entries: List[ManifestEntry] = Field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    def sample_ids(self) -> List[str]:
        return [entry.sample_id for entry in self.entries]


class EvalPair(BaseModel):
    """Reference transcript s and system output h(I)."""

    target: str
    hypothesis: str
    sample_id: Optional[str] = None


class PointPrediction(BaseModel):
    model_config = ConfigDict(frozen=True)

    codepoint: int = Field(ge=0, le=0x10FFFF)
    x: float = Field(ge=0.0, allow_inf_nan=False)
    y: float = Field(ge=0.0, allow_inf_nan=False)

    @property
    def label(self) -> str:
        return format_codepoint(self.codepoint)


class PageScore(BaseModel):
    """Per-page counts behind an EvalReport."""

    sample_id: str
    edit_distance: int = 0
    target_length: int = 0
    matched: int = 0
    predicted: int = 0
    ground_truth: int = 0


class EvalReport(BaseModel):
    """Aggregate transcription and detection scores."""

    crr: Optional[float] = None
    precision: Optional[float] = None
    recall: Optional[float] = None
    f1: Optional[float] = None
    pages: List[PageScore] = Field(default_factory=list)
    error_types: Dict[str, int] = Field(default_factory=dict)
