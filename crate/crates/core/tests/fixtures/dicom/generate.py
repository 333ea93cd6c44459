#!/usr/bin/env python3
"""Builds the DICOM fixtures in this directory and their manifest.

Run from anywhere: python3 generate.py. Output is deterministic.
"""
import json
import struct
from pathlib import Path

HERE = Path(__file__).resolve().parent

EXPLICIT_LE = "1.2.840.10008.1.2.1"
IMPLICIT_LE = "1.2.840.10008.1.2"
BIG_ENDIAN = "1.2.840.10008.1.2.2"
JPEG_BASELINE = "1.2.840.10008.1.2.4.50"
LONG_VRS = {b"OB", b"OW", b"SQ", b"UN", b"UT"}


def pad(value, vr):
    if len(value) % 2:
        value += b"\0" if vr in (b"UI", b"OB") else b" "
    return value


def explicit(group, elem, vr, value, undefined=False):
    head = struct.pack("<HH", group, elem) + vr
    if vr in LONG_VRS:
        n = 0xFFFFFFFF if undefined else len(value)
        return head + b"\0\0" + struct.pack("<I", n) + value
    return head + struct.pack("<H", len(value)) + value


def implicit(group, elem, value):
    return struct.pack("<HHI", group, elem, len(value)) + value


def us(v):
    return struct.pack("<H", v)


def text(s, vr=b"DS"):
    return pad(s.encode(), vr)


def meta(ts):
    ts_value = text(ts, b"UI")
    body = explicit(0x0002, 0x0010, b"UI", ts_value)
    return b"\0" * 128 + b"DICM" + body


def dataset(elements, syntax):
    """elements: list of (group, elem, vr, value)."""
    out = b""
    for g, e, vr, v in sorted(elements, key=lambda t: (t[0], t[1])):
        out += explicit(g, e, vr, v) if syntax == "explicit" else implicit(g, e, v)
    return out


def pixels(w, h, bits, signed=False):
    vals = []
    for y in range(h):
        for x in range(w):
            if bits == 8:
                v = (x * 3 + y * 5) % 256
                vals.append(v - 128 if signed else v)
            else:
                v = (x * 37 + y * 101) % 4096
                vals.append(v - 2048 if signed else v)
    if bits == 8:
        raw = struct.pack(f"<{len(vals)}{'b' if signed else 'B'}", *vals)
    else:
        raw = struct.pack(f"<{len(vals)}{'h' if signed else 'H'}", *vals)
    # What the reader reports: two's complement shifted to unsigned order.
    shift = (1 << (bits - 1)) if signed else 0
    decoded = [v + shift for v in vals]
    return raw, decoded


def image_tags(w, h, bits, spacing, lat=None, uid=None, signed=False, skip=()):
    tags = [
        (0x0028, 0x0002, b"US", us(1)),
        (0x0028, 0x0010, b"US", us(h)),
        (0x0028, 0x0011, b"US", us(w)),
        (0x0028, 0x0030, b"DS", text(spacing)),
        (0x0028, 0x0100, b"US", us(bits)),
        (0x0028, 0x0103, b"US", us(1 if signed else 0)),
    ]
    if lat is not None:
        tags.append((0x0020, 0x0060, b"CS", text(lat, b"CS")))
    if uid is not None:
        tags.append((0x0008, 0x0018, b"UI", text(uid, b"UI")))
    return [t for t in tags if (t[0], t[1]) not in skip]


def pixel_element(raw, bits, syntax):
    vr = b"OB" if bits == 8 else b"OW"
    raw = pad(raw, b"OB")
    return explicit(0x7FE0, 0x0010, vr, raw) if syntax == "explicit" else implicit(0x7FE0, 0x0010, raw)


def ok_entry(name, w, h, bits, row_mm, col_mm, lat, uid, decoded):
    return {
        "file": name,
        "expect": "ok",
        "width": w,
        "height": h,
        "bit_depth": bits,
        "row_mm": row_mm,
        "col_mm": col_mm,
        "laterality": lat,
        "source_id": uid,
        "pixel_sum": sum(decoded),
        "first_pixels": decoded[:4],
        "last_pixel": decoded[-1],
    }


def err_entry(name, error, detail=None):
    e = {"file": name, "expect": "error", "error": error}
    if detail is not None:
        e["detail"] = detail
    return e


def build():
    files = {}
    manifest = []

    # 1. explicit VR, 16-bit, the spacing-echo case, with a portable twin.
    raw, dec = pixels(128, 128, 16)
    body = dataset(image_tags(128, 128, 16, "0.143\\0.143", "R", "fixture.explicit16"), "explicit")
    files["explicit_le_16bit.dcm"] = meta(EXPLICIT_LE) + body + pixel_element(raw, 16, "explicit")
    manifest.append(ok_entry("explicit_le_16bit.dcm", 128, 128, 16, 0.143, 0.143, "right", "fixture.explicit16", dec))
    pgm = b"P5\n128 128\n65535\n" + struct.pack(f">{len(dec)}H", *dec)
    files["explicit_le_16bit.pgm"] = pgm
    files["explicit_le_16bit.json"] = (
        json.dumps({"spacing_mm": 0.143, "laterality": "right", "source_id": "fixture.explicit16"}, indent=2) + "\n"
    ).encode()

    # 2. explicit VR, 8-bit.
    raw, dec = pixels(96, 72, 8)
    body = dataset(image_tags(96, 72, 8, "0.2", "L", "fixture.explicit8"), "explicit")
    files["explicit_le_8bit.dcm"] = meta(EXPLICIT_LE) + body + pixel_element(raw, 8, "explicit")
    manifest.append(ok_entry("explicit_le_8bit.dcm", 96, 72, 8, 0.2, 0.2, "left", "fixture.explicit8", dec))

    # 3. implicit VR with file meta, signed 16-bit, bilateral.
    raw, dec = pixels(64, 64, 16, signed=True)
    body = dataset(image_tags(64, 64, 16, "0.25\\0.25", "B", "fixture.implicit16", signed=True), "implicit")
    files["implicit_le_signed16.dcm"] = meta(IMPLICIT_LE) + body + pixel_element(raw, 16, "implicit")
    manifest.append(ok_entry("implicit_le_signed16.dcm", 64, 64, 16, 0.25, 0.25, "bilateral", "fixture.implicit16", dec))

    # 4. bare implicit data set: no preamble, no meta, no BitsAllocated.
    raw, dec = pixels(64, 64, 8)
    body = dataset(image_tags(64, 64, 8, "0.5", skip={(0x0028, 0x0100)}), "implicit")
    files["implicit_raw_8bit.dcm"] = body + pixel_element(raw, 8, "implicit")
    manifest.append(ok_entry("implicit_raw_8bit.dcm", 64, 64, 8, 0.5, 0.5, "unknown", "dicom", dec))

    # 5. no PixelSpacing.
    raw, _ = pixels(16, 16, 16)
    body = dataset(image_tags(16, 16, 16, "0.2", skip={(0x0028, 0x0030)}), "explicit")
    files["missing_spacing.dcm"] = meta(EXPLICIT_LE) + body + pixel_element(raw, 16, "explicit")
    manifest.append(err_entry("missing_spacing.dcm", "MissingRequiredTag", "(0028,0030)"))

    # 6. no Rows.
    body = dataset(image_tags(16, 16, 16, "0.2", skip={(0x0028, 0x0010)}), "explicit")
    files["missing_rows.dcm"] = meta(EXPLICIT_LE) + body + pixel_element(raw, 16, "explicit")
    manifest.append(err_entry("missing_rows.dcm", "MissingRequiredTag", "(0028,0010)"))

    # 7. JPEG baseline, encapsulated pixel data.
    body = dataset(image_tags(16, 16, 8, "0.2"), "explicit")
    frame = b"\xff\xd8\xff\xd9"
    encapsulated = (
        struct.pack("<HHI", 0xFFFE, 0xE000, 0)
        + struct.pack("<HHI", 0xFFFE, 0xE000, len(frame)) + frame
        + struct.pack("<HHI", 0xFFFE, 0xE0DD, 0)
    )
    files["jpeg_encapsulated.dcm"] = (
        meta(JPEG_BASELINE) + body + explicit(0x7FE0, 0x0010, b"OB", encapsulated, undefined=True)
    )
    manifest.append(err_entry("jpeg_encapsulated.dcm", "UnsupportedTransferSyntax", JPEG_BASELINE))

    # 8. explicit big endian (retired syntax).
    files["big_endian.dcm"] = meta(BIG_ENDIAN) + body
    manifest.append(err_entry("big_endian.dcm", "UnsupportedTransferSyntax", BIG_ENDIAN))

    # 9. pixel data cut short.
    raw, _ = pixels(32, 32, 16)
    full = meta(EXPLICIT_LE) + dataset(image_tags(32, 32, 16, "0.2"), "explicit") + pixel_element(raw, 16, "explicit")
    files["truncated.dcm"] = full[:-700]
    manifest.append(err_entry("truncated.dcm", "MalformedElement"))

    # 10. anisotropic spacing behind an undefined-length sequence.
    raw, dec = pixels(80, 70, 16)
    inner = explicit(0x0008, 0x0100, b"SH", text("T-15750", b"SH"))
    seq = (
        explicit(0x0008, 0x2218, b"SQ", b"", undefined=True)
        + struct.pack("<HHI", 0xFFFE, 0xE000, 0xFFFFFFFF) + inner
        + struct.pack("<HHI", 0xFFFE, 0xE00D, 0)
        + struct.pack("<HHI", 0xFFFE, 0xE0DD, 0)
    )
    files["anisotropic_sequence.dcm"] = (
        meta(EXPLICIT_LE)
        + dataset([t for t in image_tags(80, 70, 16, "0.15\\0.1", "R", "fixture.aniso") if t[0] == 0x0008], "explicit")
        + seq
        + dataset([t for t in image_tags(80, 70, 16, "0.15\\0.1", "R", "fixture.aniso") if t[0] != 0x0008], "explicit")
        + pixel_element(raw, 16, "explicit")
    )
    manifest.append(ok_entry("anisotropic_sequence.dcm", 80, 70, 16, 0.15, 0.1, "right", "fixture.aniso", dec))

    for name, data in files.items():
        (HERE / name).write_bytes(data)
    (HERE / "manifest.json").write_text(json.dumps({"fixtures": manifest}, indent=2) + "\n")


if __name__ == "__main__":
    build()
