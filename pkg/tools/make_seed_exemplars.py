"""Regenerate the shipped seed exemplar file."""
from pathlib import Path

from zvforge.datagen.io import write_jsonl
from zvforge.datagen.synthetic import synthetic_exemplars

out = Path(__file__).resolve().parents[1] / "src" / "zvforge" / "datagen" / "data" / "seed_exemplars.jsonl"
write_jsonl(out, [e.to_dict() for e in synthetic_exemplars(50, seed=0)])
print(out)
