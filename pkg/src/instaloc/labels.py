from enum import IntEnum


class SemanticClass(IntEnum):
    """Indoor object classes; the integer value is the on-disk encoding."""

    CEILING = 0
    FLOOR = 1
    COLUMN = 2
    BEAM = 3
    WALL = 4
    TABLE = 5
    CHAIR = 6
    BOOKCASE = 7
    SOFA = 8
    WINDOW = 9
    DOOR = 10
    BOARD = 11
    CLUTTER = 12

    @property
    def label(self) -> str:
        return self.name.lower()

    @classmethod
    def from_name(cls, name: str) -> "SemanticClass":
        return cls[name.upper()]


NUM_CLASSES = len(SemanticClass)
