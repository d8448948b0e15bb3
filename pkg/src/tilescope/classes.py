"""The six tissue classes and their fixed rendering colors."""

CLASS_NAMES = ("urothelium", "stroma", "muscle", "damaged", "blood", "background")

NUM_CLASSES = len(CLASS_NAMES)

CLASS_INDEX = {name: i for i, name in enumerate(CLASS_NAMES)}

# Legend colors for rendered class maps. Arbitrary but frozen so that map
# rasters are diffable across runs.
CLASS_COLORS = {
    "urothelium": (0, 160, 0),      # green
    "stroma": (255, 182, 193),      # pink
    "muscle": (200, 0, 0),          # red
    "damaged": (139, 69, 19),       # brown
    "blood": (220, 20, 60),         # crimson
    "background": (255, 255, 255),  # white
}


def class_index(label: str) -> int:
    if label not in CLASS_INDEX:
        raise ValueError(f"unknown class label: {label!r}")
    return CLASS_INDEX[label]


def class_name(index: int) -> str:
    return CLASS_NAMES[index]
