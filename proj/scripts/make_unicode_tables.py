#!/usr/bin/env python3
"""Regenerate src/unicode_ranges.inc.

The byte-level BPE pre-tokenizer needs the Unicode classes \\p{L}, \\p{N}
and \\s from the `regex` module (the module the reference tokenizer uses).
This script dumps them as sorted [first, last] codepoint ranges so the C++
side can binary-search them.
"""

import sys

import regex


def collect(pattern: str) -> list[tuple[int, int]]:
    pat = regex.compile(pattern)
    ranges: list[tuple[int, int]] = []
    start = None
    prev = None
    for cp in range(0x110000):
        if 0xD800 <= cp <= 0xDFFF:  # surrogates are not valid scalar values
            match = False
        else:
            match = pat.fullmatch(chr(cp)) is not None
        if match:
            if start is None:
                start = cp
            prev = cp
        elif start is not None:
            ranges.append((start, prev))
            start = None
    if start is not None:
        ranges.append((start, prev))
    return ranges


def emit(out, name: str, ranges: list[tuple[int, int]]) -> None:
    out.write(f"inline constexpr CodepointRange {name}[] = {{\n")
    for i in range(0, len(ranges), 6):
        row = ", ".join(f"{{0x{a:X}, 0x{b:X}}}" for a, b in ranges[i : i + 6])
        out.write(f"    {row},\n")
    out.write("};\n\n")


def main() -> None:
    out_path = sys.argv[1] if len(sys.argv) > 1 else "src/unicode_ranges.inc"
    letters = collect(r"\p{L}")
    numbers = collect(r"\p{N}")
    spaces = collect(r"\s")
    with open(out_path, "w") as out:
        out.write("// Generated by scripts/make_unicode_tables.py (regex %s). Do not edit.\n" % regex.__version__)
        out.write("// Codepoint ranges for the \\p{L}, \\p{N} and \\s classes used by the\n")
        out.write("// byte-level BPE pre-tokenizer split pattern.\n\n")
        emit(out, "kLetterRanges", letters)
        emit(out, "kNumberRanges", numbers)
        emit(out, "kWhitespaceRanges", spaces)
    print(f"wrote {out_path}: {len(letters)} letter, {len(numbers)} number, {len(spaces)} whitespace ranges")


if __name__ == "__main__":
    main()
