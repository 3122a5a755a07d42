"""Dump standard-library docstrings into a plain-text corpus, one module per file.

The output is committed under data/corpus/ so runs do not depend on the local
Python build. Regenerate with ``python scripts/make_corpus.py data/corpus``.
"""
import importlib
import inspect
import sys
from pathlib import Path

# modules with import-time side effects or GUI dependencies
SKIP = {"antigravity", "this", "idlelib", "tkinter", "turtle", "turtledemo", "lib2to3", "pydoc_data"}


def module_text(mod):
    parts = [inspect.getdoc(mod) or ""]
    for attr, obj in sorted(vars(mod).items()):
        if attr.startswith("_") or getattr(obj, "__module__", None) != mod.__name__:
            continue
        doc = inspect.getdoc(obj)
        if doc:
            parts.append(doc)
    return "\n\n".join(p for p in parts if p)


def main(out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    names = sorted(m for m in sys.stdlib_module_names if not m.startswith("_") and m not in SKIP)
    written = 0
    for name in names:
        try:
            mod = importlib.import_module(name)
        except Exception:
            continue
        text = module_text(mod)
        if len(text.split()) < 20:
            continue
        (out / f"{name}.txt").write_text(text + "\n", encoding="utf-8")
        written += 1
    print(f"wrote {written} documents to {out}")


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else "data/corpus")
