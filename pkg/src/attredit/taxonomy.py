"""Attribute universe, prompt templating and the VQA question bank.

The table itself lives in ``data/taxonomy.json`` so it can be shipped and
versioned independently of the code. Everything here is immutable after
load.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache
from importlib import resources
from typing import Optional

from .exceptions import InvalidTemplateError, NoQuestionError, UnknownAttributeError


class Category(str, Enum):
    SEMANTIC = "semantic"
    DEMOGRAPHIC = "demographic"
    EXPRESSION = "expression"
    NONE = "none"


class Connective(str, Enum):
    WITH = "with"
    WEARING = "wearing"
    BARE = "bare"


CATEGORY_ORDER = (Category.SEMANTIC, Category.DEMOGRAPHIC, Category.EXPRESSION, Category.NONE)
RECONSTRUCTION_ID = "no_attribute"


@dataclass(frozen=True)
class AttributeSpec:
    id: str
    display_name: str
    category: Category
    prompt_fragment: str
    connective: Connective
    vqa_question: str
    regions: tuple[str, ...] = ()
    editable_locally: bool = False
    keyword: str = ""
    benchmark_question: Optional[str] = None
    annotation_column: Optional[str] = None
    annotation_negate: bool = False
    # benchmark question asks the opposite ("beard" for no_beard)
    benchmark_negate: bool = False
    aliases: tuple[str, ...] = ()
    # Full-face regions for expression edits; known to hallucinate faces.
    experimental_regions: tuple[str, ...] = ()

    def __post_init__(self):
        if self.editable_locally and not self.regions:
            raise ValueError(f"{self.id}: editable_locally requires regions")
        if self.category is not Category.NONE and not self.vqa_question:
            raise ValueError(f"{self.id}: missing VQA question")

    @property
    def is_reconstruction(self) -> bool:
        return self.category is Category.NONE

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "display_name": self.display_name,
            "category": self.category.value,
            "prompt_fragment": self.prompt_fragment,
            "connective": self.connective.value,
            "vqa_question": self.vqa_question,
            "regions": list(self.regions),
            "editable_locally": self.editable_locally,
            "keyword": self.keyword,
            "benchmark_question": self.benchmark_question,
            "annotation_column": self.annotation_column,
            "annotation_negate": self.annotation_negate,
            "benchmark_negate": self.benchmark_negate,
            "aliases": list(self.aliases),
            "experimental_regions": list(self.experimental_regions),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AttributeSpec":
        return cls(
            id=d["id"],
            display_name=d["display_name"],
            category=Category(d["category"]),
            prompt_fragment=d["prompt_fragment"],
            connective=Connective(d["connective"]),
            vqa_question=d["vqa_question"],
            regions=tuple(d.get("regions", ())),
            editable_locally=bool(d.get("editable_locally", False)),
            keyword=d.get("keyword", ""),
            benchmark_question=d.get("benchmark_question"),
            annotation_column=d.get("annotation_column"),
            annotation_negate=bool(d.get("annotation_negate", False)),
            benchmark_negate=bool(d.get("benchmark_negate", False)),
            aliases=tuple(d.get("aliases", ())),
            experimental_regions=tuple(d.get("experimental_regions", ())),
        )


@dataclass(frozen=True)
class PromptTemplate:
    rare_identifier: str
    class_noun: str = "person"

    def __post_init__(self):
        tok = self.rare_identifier
        if tok and (tok.split() != [tok]):
            raise InvalidTemplateError(f"rare identifier must be a single token, got {tok!r}")


@dataclass(frozen=True)
class Taxonomy:
    version: str
    attributes: tuple[AttributeSpec, ...]
    region_vocabulary: tuple[str, ...]
    open_questions: dict = field(default_factory=dict, hash=False)

    def __post_init__(self):
        by_id = {}
        for a in self.attributes:
            for key in (a.id, *a.aliases):
                if key in by_id:
                    raise ValueError(f"duplicate attribute key {key!r}")
                by_id[key] = a
            bad = set(a.regions) | set(a.experimental_regions)
            bad -= set(self.region_vocabulary)
            if bad:
                raise ValueError(f"{a.id}: unknown regions {sorted(bad)}")
        object.__setattr__(self, "_by_id", by_id)

    def get(self, key: str) -> AttributeSpec:
        try:
            return self._by_id[key.strip().lower().replace(" ", "_")]
        except KeyError:
            raise UnknownAttributeError(f"unknown attribute {key!r}") from None

    def __contains__(self, key: str) -> bool:
        return key.strip().lower().replace(" ", "_") in self._by_id

    def __iter__(self):
        return iter(self.attributes)

    def __len__(self):
        return len(self.attributes)

    @property
    def reconstruction(self) -> AttributeSpec:
        return self.get(RECONSTRUCTION_ID)

    def to_dict(self) -> dict:
        return {
            "version": self.version,
            "region_vocabulary": list(self.region_vocabulary),
            "open_questions": self.open_questions,
            "attributes": [a.to_dict() for a in self.attributes],
        }


def _sort_key(a: AttributeSpec):
    return CATEGORY_ORDER.index(a.category)


@lru_cache(maxsize=1)
def load_taxonomy() -> Taxonomy:
    raw = resources.files("attredit").joinpath("data/taxonomy.json").read_text()
    doc = json.loads(raw)
    attrs = sorted((AttributeSpec.from_dict(d) for d in doc["attributes"]), key=_sort_key)
    return Taxonomy(
        version=doc["version"],
        attributes=tuple(attrs),
        region_vocabulary=tuple(doc["region_vocabulary"]),
        open_questions=doc.get("open_questions", {}),
    )


def list_attributes(category_filter: Optional[Category | str] = None) -> list[AttributeSpec]:
    attrs = list(load_taxonomy().attributes)
    if category_filter is None:
        return attrs
    cat = Category(category_filter)
    return [a for a in attrs if a.category is cat]


def get_attribute(key: str) -> AttributeSpec:
    return load_taxonomy().get(key)


def build_edit_prompt(template: PromptTemplate, attr: AttributeSpec, *, require_identifier: bool = True) -> str:
    """Compose ``photo of a <id> <noun> <connective> <fragment>``.

    Regularization captions pass ``require_identifier=False`` and get the
    generic ``photo of a person ...`` form.
    """
    if require_identifier and not template.rare_identifier:
        raise InvalidTemplateError("rare identifier must not be empty")
    subject = " ".join(t for t in (template.rare_identifier, template.class_noun) if t)
    prompt = f"photo of a {subject}"
    if attr.is_reconstruction:
        return prompt
    if attr.connective is Connective.BARE:
        return f"{prompt} {attr.prompt_fragment}"
    return f"{prompt} {attr.connective.value} {attr.prompt_fragment}"


def question_for(attr: AttributeSpec) -> str:
    if attr.is_reconstruction or not attr.vqa_question:
        raise NoQuestionError(f"attribute {attr.id!r} has no VQA question")
    return attr.vqa_question


def attributes_in_prompt(prompt: str) -> list[AttributeSpec]:
    """Attributes whose prompt fragment appears in ``prompt``."""
    text = " " + " ".join(prompt.lower().split()) + " "
    found = []
    for a in load_taxonomy().attributes:
        if a.prompt_fragment and f" {a.prompt_fragment.lower()} " in text:
            found.append(a)
    return found
