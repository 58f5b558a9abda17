from __future__ import annotations

import hashlib
import string
from dataclasses import dataclass
from pathlib import Path

BUILTIN_DIR = Path(__file__).with_name("templates")
STEPS = ("discover", "describe", "rank")


@dataclass(frozen=True)
class PromptTemplate:
    """A prompt file with ``${name}`` placeholders; its hash keys the cache."""

    name: str
    text: str

    @property
    def digest(self) -> str:
        return hashlib.sha256(self.text.encode("utf-8")).hexdigest()[:16]

    @property
    def placeholders(self) -> set[str]:
        found = set()
        for _, named, braced, _ in string.Template.pattern.findall(self.text):
            if named or braced:
                found.add(named or braced)
        return found

    def render(self, **values) -> str:
        missing = self.placeholders - set(values)
        if missing:
            raise KeyError(f"template {self.name!r} needs values for {sorted(missing)}")
        return string.Template(self.text).substitute(**{k: str(v) for k, v in values.items()})


def load_template(step: str, template_dir=None) -> PromptTemplate:
    path = Path(template_dir or BUILTIN_DIR) / f"{step}.txt"
    if not path.exists():
        raise FileNotFoundError(f"no template for step {step!r} at {path}")
    return PromptTemplate(step, path.read_text(encoding="utf-8"))


def load_templates(template_dir=None) -> dict[str, PromptTemplate]:
    return {step: load_template(step, template_dir) for step in STEPS}
