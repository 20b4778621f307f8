"""Reads a PGM written by the heatmap renderer with Pillow and compares pixels."""
import sys
from pathlib import Path

from PIL import Image


def main(directory: str, upscale: int = 3) -> int:
    d = Path(directory)
    expected = [int(x) for x in (d / "ramp.expected").read_text().split()]
    img = Image.open(d / "ramp.pgm")
    if img.mode != "L":
        print(f"unexpected mode {img.mode}")
        return 1
    w, h = img.size
    side = int(len(expected) ** 0.5)
    if (w, h) != (side * upscale, side * upscale):
        print(f"unexpected size {img.size}")
        return 1
    px = img.load()
    for y in range(h):
        for x in range(w):
            want = expected[(y // upscale) * side + x // upscale]
            if px[x, y] != want:
                print(f"pixel ({x}, {y}) = {px[x, y]}, expected {want}")
                return 1
    print(f"ok {w}x{h}")
    return 0


if __name__ == "__main__":
    sys.exit(main(sys.argv[1]))
