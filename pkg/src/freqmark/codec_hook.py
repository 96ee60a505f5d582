"""Pillow-backed external codec: ``python -m freqmark.codec_hook webp 80``.

Reads a PNG on stdin, encodes it with the named codec at the given quality,
decodes it again and writes the result as PNG on stdout.
"""
import io
import sys

from PIL import Image


def roundtrip(png: bytes, kind: str, quality: float) -> bytes:
    with Image.open(io.BytesIO(png)) as im:
        im = im.convert("RGB")
    enc = io.BytesIO()
    if kind == "webp":
        im.save(enc, format="WEBP", quality=int(quality))
    elif kind == "jpeg2000":
        # quality is read as a target PSNR in dB
        im.save(enc, format="JPEG2000", quality_mode="dB", quality_layers=[float(quality)])
    else:
        raise SystemExit(f"unsupported codec {kind!r}")
    enc.seek(0)
    with Image.open(enc) as dec:
        out = io.BytesIO()
        dec.convert("RGB").save(out, format="PNG")
    return out.getvalue()


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    if len(argv) != 2:
        print("usage: python -m freqmark.codec_hook {webp|jpeg2000} QUALITY", file=sys.stderr)
        return 2
    sys.stdout.buffer.write(roundtrip(sys.stdin.buffer.read(), argv[0], float(argv[1])))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
