"""Regenerates the golden mask dumps in masks/.

Blocks are ordered target, contexts by index, EEG, text. A row may attend to
a column when both lie in the same block or the row is a text token; in hub
mode every row may also attend to the text columns.
"""

import pathlib

LAYOUTS = [
    "x:1,txt:1",
    "x:2,y1:1,txt:2",
    "x:4,y1:4,e:2,txt:3",
    "x:3,y1:2,y2:2,e:1,txt:2",
    "y2:2,x:3,txt:1,y1:1",
]


def rank(name):
    if name == "x":
        return (0, 0)
    if name == "e":
        return (2, 0)
    if name == "txt":
        return (3, 0)
    return (1, int(name[1:]))


def owners(layout):
    blocks = sorted((p.split(":") for p in layout.split(",")), key=lambda b: rank(b[0]))
    out = []
    for name, n in blocks:
        out += [name] * int(n)
    return out


def dump(layout, hub):
    own = owners(layout)
    lines = []
    for a in own:
        row = ""
        for b in own:
            ok = a == b or a == "txt" or (hub and b == "txt")
            row += "." if ok else "#"
        lines.append(row)
    return "\n".join(lines) + "\n"


def fixture_name(layout):
    return layout.replace(":", "").replace(",", "_")


if __name__ == "__main__":
    root = pathlib.Path(__file__).parent / "masks"
    root.mkdir(exist_ok=True)
    for layout in LAYOUTS:
        for mode in ("literal", "hub"):
            text = dump(layout, mode == "hub")
            (root / f"{fixture_name(layout)}.{mode}.txt").write_text(text)
