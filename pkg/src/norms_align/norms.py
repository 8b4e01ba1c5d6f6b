import json
import re
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Tuple, Union

from norms_align.errors import EmptyWord, RegistryError

PLACEHOLDER = "{word}"
ANSWER_INSTRUCTION = "Please answer only with the number."


class DatasetId(Enum):
    """Published norm datasets the harness knows how to evaluate."""
    GLASGOW = "glasgow"
    LANCASTER = "lancaster"


class QuoteStyle(Enum):
    """How the stimulus word is quoted inside a prompt."""
    TYPOGRAPHIC = "typographic"  # “word”
    STRAIGHT = "straight"  # "word"

    def wrap(self, word: str) -> str:
        if self is QuoteStyle.TYPOGRAPHIC:
            return f"“{word}”"
        return f'"{word}"'


@dataclass(frozen=True)
class RatingScale:
    """Integer Likert range of one feature.

    Every point must be a single decimal digit, so that the model can answer
    with exactly one token.
    """
    min: int
    max: int

    def __post_init__(self):
        if not (isinstance(self.min, int) and isinstance(self.max, int)):
            raise RegistryError(f"Scale bounds must be integers, got {self.min!r}-{self.max!r}")
        if not 0 <= self.min < self.max <= 9:
            raise RegistryError(f"Invalid scale {self.min}-{self.max}: need 0 <= min < max <= 9")

    @property
    def points(self) -> Tuple[int, ...]:
        return tuple(range(self.min, self.max + 1))

    def contains(self, value: float) -> bool:
        return self.min <= value <= self.max

    def __str__(self):
        return f"{self.min}-{self.max}"


@dataclass(frozen=True)
class NormFeature:
    """One rated word property and the instructions used to elicit it."""
    id: str
    dataset: DatasetId
    scale: RatingScale
    prompt_template: str
    display_name: str = ""
    skew_prone: bool = False

    def __post_init__(self):
        if not self.id:
            raise RegistryError("Feature id must not be empty")
        count = self.prompt_template.count(PLACEHOLDER)
        if count != 1:
            raise RegistryError(
                f"Template of '{self.id}' must contain {PLACEHOLDER} exactly once, found {count}")
        if ANSWER_INSTRUCTION not in self.prompt_template:
            raise RegistryError(f"Template of '{self.id}' lacks '{ANSWER_INSTRUCTION}'")
        if not self.display_name:
            object.__setattr__(self, "display_name", self.id.capitalize())


@dataclass(frozen=True)
class WordRating:
    """Human norm value of one word on one feature."""
    word: str
    human_mean: float
    human_sd: Optional[float] = None
    n_raters: Optional[int] = None


@dataclass(frozen=True)
class NormDataset:
    """Words x features with human mean ratings.

    Attributes:
        id: DatasetId of the source norms.
        ratings: Dict mapping feature id to its WordRating list (dataset order).
        registry: FeatureRegistry the ratings are checked against (embedded when None).
    """
    id: DatasetId
    ratings: Dict[str, Tuple[WordRating, ...]] = field(default_factory=dict)
    registry: Optional["FeatureRegistry"] = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "registry", _resolve(self.registry))
        registered = {f.id: f for f in self.registry.for_dataset(self.id)}
        for feature_id, words in self.ratings.items():
            feature = registered.get(feature_id)
            if feature is None:
                raise RegistryError(f"Feature '{feature_id}' is not registered for {self.id.value}")
            seen = set()
            for rating in words:
                if rating.word in seen:
                    raise RegistryError(f"Duplicate word '{rating.word}' in {feature_id}")
                seen.add(rating.word)
                if not feature.scale.contains(rating.human_mean):
                    raise RegistryError(
                        f"Rating {rating.human_mean} of '{rating.word}' outside {feature_id} scale {feature.scale}")

    def words(self, feature_id: str) -> Tuple[WordRating, ...]:
        return self.ratings.get(feature_id, ())


# Lancaster perceptual ratings share one preamble; only the sense phrase differs.
_LANCASTER_PREAMBLE = (
    "You will be asked to rate how much you experience everyday concepts using perceptual senses. "
    "There are no right or wrong answers so please use your own judgement. "
    "The rating scale runs from 0 (not experienced at all with that sense) to 5 "
    "(experienced greatly with that sense). " + ANSWER_INSTRUCTION +
    " To what extent do you experience {sense} word " + PLACEHOLDER
)

_LANCASTER_SENSES = [
    ("interoceptive", "Interoceptive", "by sensations inside your body", False),
    ("gustatory", "Gustatory", "by tasting", True),
    ("olfactory", "Olfactory", "by smelling", True),
    ("haptic", "Haptic", "by feeling through touch", False),
    ("auditory", "Auditory", "by hearing", False),
    ("visual", "Visual", "by seeing", False),
]

_GLASGOW_TEMPLATES = [
    ("arousal", "Arousal", 9,
     "Arousal is a measure of excitement versus calmness. A word is AROUSING if it makes you feel "
     "stimulated, excited, frenzied, jittery, or wide-awake. A word is UNAROUSING if it makes you feel "
     "relaxed, calm, sluggish, dull, or sleepy. Please indicate how arousing you think word {word} is "
     "on a scale of 1 (VERY UNAROUSING) to 9 (VERY AROUSING), with the midpoint representing moderate "
     "arousal."),
    ("valence", "Valence", 9,
     "Valence is a measure of value or worth. A word is POSITIVE if it represents something considered "
     "good, whereas a word is NEGATIVE if it represents something considered bad. Please indicate the "
     "valence of word {word} on a scale of 1 (VERY NEGATIVE) to 9 (VERY POSITIVE), with the midpoint "
     "representing NEUTRAL."),
    ("dominance", "Dominance", 9,
     "Dominance is a measure of the degree of control you feel. A word can make you feel DOMINANT, "
     "influential, important, or in control, or it can make you feel CONTROLLED, influenced, cared-for, "
     "or submissive. Please indicate the degree of control you feel when you see word {word} on a scale "
     "of 1 (VERY CONTROLLED) to 9 (VERY DOMINANT), with the midpoint being neither controlled nor "
     "dominant."),
    ("concreteness", "Concreteness", 9,
     "Concreteness is a measure of how concrete or abstract something is. A word is CONCRETE if it "
     "represents something that exists in a definite physical form in the real world. In contrast, a "
     "word is ABSTRACT if it represents more of a concept or idea. Please indicate how concrete you "
     "think word {word} is on a scale of 1 (VERY ABSTRACT) to 9 (VERY CONCRETE), with the midpoint "
     "representing medium concreteness."),
    ("imageability", "Imageability", 9,
     "Imageability is a measure of how easy or difficult something is to imagine. Some words evoke "
     "images immediately, whereas others may do so only with difficulty or not at all. Please indicate "
     "how imageable you think word {word} is on a scale of 1 (VERY UNIMAGEABLE) to 9 (VERY IMAGEABLE), "
     "with the midpoint representing moderate imageability."),
    ("familiarity", "Familiarity", 9,
     "Familiarity is a measure of how familiar you are with a word. A word is VERY FAMILIAR if you see, "
     "hear or use it every day, whereas a word is VERY UNFAMILIAR if you have never seen it before. "
     "Please indicate how familiar you think word {word} is on a scale of 1 (VERY UNFAMILIAR) to 9 "
     "(VERY FAMILIAR), with the midpoint representing moderate familiarity."),
    ("gender", "Gender", 7,
     "Gender association is a measure of how strongly a word's meaning is associated with male or "
     "female behaviour. A word can be considered MASCULINE if it is linked to male behaviour, or "
     "FEMININE if it is linked to female behaviour. Please indicate the gender associated with word "
     "{word} on a scale of 1 (VERY FEMININE) to 7 (VERY MASCULINE), with the midpoint being neuter "
     "(neither feminine nor masculine)."),
]


def _embedded_registry() -> List[NormFeature]:
    features = [
        NormFeature(fid, DatasetId.GLASGOW, RatingScale(1, top), f"{text} {ANSWER_INSTRUCTION}", name)
        for fid, name, top, text in _GLASGOW_TEMPLATES
    ]
    features += [
        NormFeature(fid, DatasetId.LANCASTER, RatingScale(0, 5),
                    _LANCASTER_PREAMBLE.replace("{sense}", sense), name, skew_prone)
        for fid, name, sense, skew_prone in _LANCASTER_SENSES
    ]
    return features


@dataclass(frozen=True)
class FeatureRegistry:
    """Immutable, ordered set of the features a run can evaluate."""
    features: Tuple[NormFeature, ...]

    def __post_init__(self):
        object.__setattr__(self, "features", tuple(self.features))
        seen = set()
        for feature in self.features:
            if feature.id in seen:
                raise RegistryError(f"Duplicate feature id '{feature.id}'")
            seen.add(feature.id)

    def __iter__(self) -> Iterator[NormFeature]:
        return iter(self.features)

    def __len__(self) -> int:
        return len(self.features)

    def for_dataset(self, dataset: DatasetId) -> List[NormFeature]:
        return [f for f in self.features if f.dataset == dataset]

    def get(self, feature_id: str) -> NormFeature:
        for feature in self.features:
            if feature.id == feature_id:
                return feature
        raise RegistryError(f"Unknown feature '{feature_id}'. Must be one of {[f.id for f in self.features]}")


EMBEDDED_REGISTRY = FeatureRegistry(tuple(_embedded_registry()))


def _resolve(registry: Optional[FeatureRegistry]) -> FeatureRegistry:
    return EMBEDDED_REGISTRY if registry is None else registry


def feature_registry(registry: Optional[FeatureRegistry] = None) -> List[NormFeature]:
    """Return every in-scope feature (7 Glasgow, 6 Lancaster unless overridden)."""
    return list(_resolve(registry))


def features_for(dataset: DatasetId, registry: Optional[FeatureRegistry] = None) -> List[NormFeature]:
    """Registered features of one dataset, in registry order."""
    return _resolve(registry).for_dataset(dataset)


def get_feature(feature_id: str, registry: Optional[FeatureRegistry] = None) -> NormFeature:
    return _resolve(registry).get(feature_id)


def parse_dataset_id(value: str) -> DatasetId:
    try:
        return DatasetId(value)
    except ValueError:
        raise RegistryError(
            f"Invalid dataset value: '{value}'. Must be one of {[e.value for e in DatasetId]}")


def feature_from_dict(entry: Dict, index: int = 0) -> NormFeature:
    """Build a NormFeature from one registry override entry."""
    missing = [k for k in ("id", "dataset", "min", "max", "template") if k not in entry]
    if missing:
        raise RegistryError(f"Registry entry #{index} misses keys: {', '.join(missing)}")
    return NormFeature(
        id=entry["id"],
        dataset=parse_dataset_id(entry["dataset"]),
        scale=RatingScale(entry["min"], entry["max"]),
        prompt_template=entry["template"],
        display_name=entry.get("display_name", ""),
        skew_prone=bool(entry.get("skew_prone", False)),
    )


def load_registry(path: Union[str, Path, None] = None) -> FeatureRegistry:
    """Build a registry from the embedded features and an optional override file.

    Args:
        path: JSON file with a list of feature entries (keys id, dataset, min, max,
            template, optional display_name and skew_prone). Entries replace the
            embedded feature with the same id or are appended.

    Returns:
        A new FeatureRegistry; EMBEDDED_REGISTRY itself when no path is given.
    """
    if path is None:
        return EMBEDDED_REGISTRY
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Registry file {path.as_posix()} not found")
    with path.open("r", encoding="utf-8") as f:
        entries = json.load(f)
    if isinstance(entries, dict):
        entries = [entries]
    features = list(EMBEDDED_REGISTRY)
    by_id = {f.id: ix for ix, f in enumerate(features)}
    for ix, entry in enumerate(entries):
        feature = feature_from_dict(entry, index=ix)
        if feature.id in by_id:
            features[by_id[feature.id]] = feature
        else:
            by_id[feature.id] = len(features)
            features.append(feature)
    return FeatureRegistry(tuple(features))


_SENSE_RE = re.compile(r"\s*\([^()]*\)\s*$")


def strip_sense_annotation(word: str) -> str:
    """Drop a trailing sense annotation: 'toast (bread)' -> 'toast'."""
    stripped = _SENSE_RE.sub("", word)
    return stripped or word


def render_prompt(
    feature: NormFeature,
    word: str,
    quotes: QuoteStyle = QuoteStyle.TYPOGRAPHIC,
    strip_sense: bool = False,
) -> str:
    """Render the rating question of a feature for one word.

    Args:
        feature: Feature whose template is used.
        word: Stimulus word, used verbatim after trimming.
        quotes: Quote style wrapped around the word.
        strip_sense: Drop a trailing parenthetical sense annotation first.

    Raises:
        EmptyWord: If the word is blank.
    """
    if word is None or not word.strip():
        raise EmptyWord("Word must not be blank")
    word = word.strip()
    if strip_sense:
        word = strip_sense_annotation(word)
    return feature.prompt_template.replace(PLACEHOLDER, quotes.wrap(word))
