"""Regenerates the scenario fixtures in this directory.

Geometry is given in meters; a cell belongs to a rectangle when its center
lies inside it.
"""

import math
from pathlib import Path

RES = 0.1
HERE = Path(__file__).resolve().parent


class Sheet:
    def __init__(self, width_m, height_m):
        self.w = round(width_m / RES)
        self.h = round(height_m / RES)
        self.rows = [["#"] * self.w for _ in range(self.h)]

    def fill(self, x0, x1, y0, y1, ch="."):
        for j in range(self.h):
            cy = (j + 0.5) * RES
            if not (y0 <= cy <= y1):
                continue
            for i in range(self.w):
                cx = (i + 0.5) * RES
                if x0 <= cx <= x1:
                    self.rows[j][i] = ch

    def write(self, name, start, goal, seed, tolerance=0.75):
        lines = [
            f"resolution {RES}",
            f"start {start[0]} {start[1]} {start[2]}",
            f"goal {goal[0]} {goal[1]}",
            f"tolerance {tolerance}",
            f"seed {seed}",
        ]
        lines += ["".join(r) for r in reversed(self.rows)]
        (HERE / f"{name}.scn").write_text("\n".join(lines) + "\n")


HALF_PI = round(math.pi / 2, 6)


def u_corridor():
    # start room; the closed pocket opens on the direct line to the goal,
    # the passage beside it reaches the goal room behind the pocket
    s = Sheet(8.0, 14.0)
    s.fill(0.5, 7.5, 0.5, 4.5)
    s.fill(2.0, 3.6, 4.5, 10.0, "D")
    s.fill(3.9, 5.9, 4.5, 11.0)
    s.fill(0.5, 7.5, 11.0, 13.5)
    s.write("u_corridor", (1.5, 1.5, 0.8), (4.9, 12.5), 11)


def straight_corridor():
    s = Sheet(2.8, 13.0)
    s.fill(0.4, 2.4, 0.4, 12.6)
    s.write("straight_corridor", (1.4, 1.0, HALF_PI), (1.4, 12.0), 12)


def loading_dock():
    # yard along the south; a dock bay recessed into the building faces the
    # goal, the real route runs east around the building
    s = Sheet(14.0, 12.0)
    s.fill(0.5, 13.5, 0.5, 4.0)
    s.fill(4.5, 7.0, 4.0, 8.0, "D")
    s.fill(10.0, 13.5, 4.0, 11.5)
    s.write("loading_dock", (2.0, 1.5, 0.5), (12.5, 10.5), 13)


def hidden_pocket():
    # mirror of the U-corridor whose pocket has an ambiguous floor
    s = Sheet(8.0, 14.0)
    s.fill(0.5, 7.5, 0.5, 4.5)
    s.fill(4.4, 6.0, 4.5, 10.0, "d")
    s.fill(2.1, 4.1, 4.5, 11.0)
    s.fill(0.5, 7.5, 11.0, 13.5)
    s.write("hidden_pocket", (6.5, 1.5, 2.3), (3.1, 12.5), 14)


def sealed_room():
    s = Sheet(7.0, 4.0)
    s.fill(0.5, 3.5, 0.5, 3.5)
    s.fill(4.5, 6.5, 0.5, 3.5)
    s.write("sealed_room", (1.5, 2.0, 0.0), (5.5, 2.0), 15)


def trivial():
    s = Sheet(3.0, 3.0)
    s.fill(0.3, 2.7, 0.3, 2.7)
    s.write("trivial", (1.0, 1.5, 0.0), (2.0, 1.5), 16)


if __name__ == "__main__":
    u_corridor()
    straight_corridor()
    loading_dock()
    hidden_pocket()
    sealed_room()
    trivial()
