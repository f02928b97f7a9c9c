"""Input checks shared by the estimator wrappers."""

from collections.abc import Mapping

from .dataforge import ALPHABET, PreferencePair
from .exceptions import ContractError


def check_pairs(X, alphabet=ALPHABET):
    """Coerce ``X`` to a list of :class:`PreferencePair` with unique ids.

    Accepts pairs, mappings with prompt/chosen/rejected text, or
    ``(prompt, chosen, rejected)`` text triples.  Items without an id get their
    position.
    """
    if X is None:
        raise ContractError("expected a sequence of preference pairs, got None")
    out = []
    for i, item in enumerate(X):
        if isinstance(item, PreferencePair):
            out.append(item)
        elif isinstance(item, Mapping):
            try:
                out.append(PreferencePair.from_text(item["prompt"], item["chosen"], item["rejected"],
                                                    item.get("first_edit_index"), item.get("id", i),
                                                    alphabet=alphabet))
            except KeyError as e:
                raise ContractError(f"item {i} is missing field {e.args[0]!r}") from None
        elif isinstance(item, (tuple, list)) and len(item) == 3 and all(isinstance(s, str) for s in item):
            out.append(PreferencePair.from_text(*item, id=i, alphabet=alphabet))
        else:
            raise ContractError(f"item {i} is not a preference pair: {type(item).__name__}")
    if not out:
        raise ContractError("expected at least one preference pair")
    if len({p.id for p in out}) != len(out):
        raise ContractError("pair ids must be unique")
    return out


def check_vocab(pairs, vocab_size):
    for p in pairs:
        top = max(max(p.prompt), max(p.chosen), max(p.rejected))
        if top >= vocab_size:
            raise ContractError(f"pair {p.id} uses token {top} outside a vocabulary of {vocab_size}")
    return pairs
