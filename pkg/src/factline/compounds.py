"""Grammar for compound medication strings.

Source systems store drug formulations as single strings such as
``BUTALBITAL-ASPIRIN-CAFFEINE 50 MG-325 MG-40 MG CAPSULE``: ingredient names
joined by hyphens, one dose per ingredient (positionally aligned), and a form.
This module renders, parses, and normalizes that shape. The synthetic source
generates through ``render`` and the medication translator parses through
``parse``, so decomposition ground truth is known exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import FactlineError

# rational multipliers to canonical milligrams (num, den); division keeps
# round-trips through alternate units exact for clean decimal doses
DOSE_UNITS = {"MG": (1, 1), "G": (1000, 1), "MCG": (1, 1000)}


class CompoundParseError(FactlineError):
    pass


@dataclass(frozen=True)
class Ingredient:
    name: str  # lowercase canonical
    dose_mg: float


@dataclass(frozen=True)
class Compound:
    ingredients: tuple[Ingredient, ...]
    form: str  # lowercase canonical

    def sorted_by_name(self) -> "Compound":
        return Compound(tuple(sorted(self.ingredients, key=lambda i: i.name)), self.form)


def _format_dose(mg: float) -> str:
    return str(int(mg)) if float(mg).is_integer() else repr(float(mg))


def render(compound: Compound) -> str:
    """Render a compound in canonical form: alphabetical ingredients, doses in MG."""
    ordered = compound.sorted_by_name()
    names = "-".join(i.name.upper() for i in ordered.ingredients)
    doses = "-".join(f"{_format_dose(i.dose_mg)} MG" for i in ordered.ingredients)
    return f"{names} {doses} {ordered.form.upper()}"


def render_raw(names: list[str], doses: list[tuple[float, str]], form: str) -> str:
    """Render a source-style compound without canonicalization (any order/unit)."""
    if len(names) != len(doses):
        raise ValueError("one dose per ingredient required")
    dose_part = "-".join(f"{_format_dose(v)} {u}" for v, u in doses)
    return f"{'-'.join(n.upper() for n in names)} {dose_part} {form.upper()}"


def parse(text: str, known_ingredients: set[str] | None = None,
          known_forms: set[str] | None = None) -> Compound:
    """Parse a compound string, converting doses to canonical milligrams.

    Raises CompoundParseError on any structural problem or, when lexicons are
    given, on unknown ingredient names or forms (callers route these to QA/QC).
    """
    parts = text.strip().split(" ")
    if len(parts) < 3:
        raise CompoundParseError(f"expected 'NAMES DOSES FORM', got {text!r}")
    names_part, form = parts[0], parts[-1]
    doses_part = " ".join(parts[1:-1])

    names = [n.strip().lower() for n in names_part.split("-")]
    dose_tokens = [d.strip() for d in doses_part.split("-")]
    if len(names) != len(dose_tokens):
        raise CompoundParseError(
            f"{len(names)} ingredient(s) but {len(dose_tokens)} dose(s) in {text!r}")
    if any(not n for n in names):
        raise CompoundParseError(f"empty ingredient name in {text!r}")

    ingredients = []
    for name, tok in zip(names, dose_tokens):
        fields = tok.split(" ")
        if len(fields) != 2:
            raise CompoundParseError(f"malformed dose {tok!r} in {text!r}")
        raw_value, unit = fields
        if unit.upper() not in DOSE_UNITS:
            raise CompoundParseError(f"unknown dose unit {unit!r} in {text!r}")
        try:
            value = float(raw_value)
        except ValueError:
            raise CompoundParseError(f"non-numeric dose {raw_value!r} in {text!r}") from None
        if known_ingredients is not None and name not in known_ingredients:
            raise CompoundParseError(f"unknown ingredient {name!r} in {text!r}")
        num, den = DOSE_UNITS[unit.upper()]
        ingredients.append(Ingredient(name=name, dose_mg=value * num / den))

    form_l = form.strip().lower()
    if known_forms is not None and form_l not in known_forms:
        raise CompoundParseError(f"unknown form {form!r} in {text!r}")
    return Compound(tuple(ingredients), form_l)


def normalize(text: str, known_ingredients: set[str] | None = None,
              known_forms: set[str] | None = None) -> str:
    """Canonical rendering of a source compound string."""
    return render(parse(text, known_ingredients, known_forms))
