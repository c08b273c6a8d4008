"""Salience grouping of the 80 COCO classes used for stratified grounding scores."""

from __future__ import annotations

SALIENT_CREATURES = (
    "person", "bird", "cat", "dog", "horse", "sheep", "cow", "elephant", "bear", "zebra", "giraffe",
)
SALIENT_OBJECTS = (
    "bicycle", "car", "motorcycle", "airplane", "bus", "train", "truck", "boat", "bench", "chair",
    "couch", "bed", "dining table", "toilet", "sink", "refrigerator", "clock",
)
INCONSPICUOUS = (
    "traffic light", "fire hydrant", "stop sign", "parking meter", "backpack", "umbrella", "handbag",
    "tie", "suitcase", "frisbee", "skis", "snowboard", "sports ball", "kite", "baseball bat",
    "baseball glove", "skateboard", "surfboard", "tennis racket", "bottle", "wine glass", "cup", "fork",
    "knife", "spoon", "bowl", "banana", "apple", "sandwich", "orange", "broccoli", "carrot", "hot dog",
    "pizza", "donut", "cake", "potted plant", "tv", "laptop", "mouse", "remote", "keyboard",
    "cell phone", "microwave", "oven", "toaster", "book", "vase", "scissors", "teddy bear",
    "hair drier", "toothbrush",
)

LEAF_CATEGORIES = ("SC", "SO", "I")
CATEGORIES = ("A", "S", "SC", "SO", "I")
# aggregate categories and the leaves they cover
GROUPS = {"A": ("SC", "SO", "I"), "S": ("SC", "SO"), "SC": ("SC",), "SO": ("SO",), "I": ("I",)}

DEFAULT_TAXONOMY: dict[str, str] = {
    **{c: "SC" for c in SALIENT_CREATURES},
    **{c: "SO" for c in SALIENT_OBJECTS},
    **{c: "I" for c in INCONSPICUOUS},
}


def salience_category(label: str, taxonomy: dict[str, str] | None = None) -> str:
    taxonomy = DEFAULT_TAXONOMY if taxonomy is None else taxonomy
    try:
        return taxonomy[label.strip().lower()]
    except KeyError:
        raise KeyError(f"label {label!r} is not in the salience taxonomy") from None


def category_sizes(taxonomy: dict[str, str] | None = None) -> dict[str, int]:
    taxonomy = DEFAULT_TAXONOMY if taxonomy is None else taxonomy
    counts = {c: 0 for c in LEAF_CATEGORIES}
    for cat in taxonomy.values():
        counts[cat] += 1
    return counts
