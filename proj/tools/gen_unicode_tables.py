#!/usr/bin/env python3
"""Regenerates src/unicode_tables.inc.

Code point classes for the GPT-2 pre-tokenizer: letters (\\p{L}), numbers
(\\p{N}) and whitespace (\\s), taken from the `regex` module so the C++ side
classifies characters exactly like the Python reference tokenizer.
"""
import pathlib
import sys

import regex

CLASSES = {
    "kLetterRanges": regex.compile(r"\p{L}"),
    "kNumberRanges": regex.compile(r"\p{N}"),
    "kSpaceRanges": regex.compile(r"\s"),
}


def ranges(pattern):
    out = []
    start = None
    for cp in range(0x110000):
        if 0xD800 <= cp <= 0xDFFF:
            hit = False
        else:
            hit = pattern.fullmatch(chr(cp)) is not None
        if hit and start is None:
            start = cp
        elif not hit and start is not None:
            out.append((start, cp - 1))
            start = None
    if start is not None:
        out.append((start, 0x10FFFF))
    return out


def main():
    dest = pathlib.Path(sys.argv[1] if len(sys.argv) > 1 else
                        pathlib.Path(__file__).resolve().parent.parent / "src" / "unicode_tables.inc")
    lines = ["// Generated by tools/gen_unicode_tables.py. Do not edit.", ""]
    for name, pattern in CLASSES.items():
        rs = ranges(pattern)
        lines.append(f"inline constexpr CodepointRange {name}[] = {{")
        for lo, hi in rs:
            lines.append(f"    {{0x{lo:X}, 0x{hi:X}}},")
        lines.append("};")
        lines.append("")
    dest.write_text("\n".join(lines))
    print(f"wrote {dest}")


if __name__ == "__main__":
    main()
