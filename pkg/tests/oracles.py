"""Reference semantics for the arithmetic subset, written from the ISA manual's
definitions using signed/unsigned Python integers.  Nothing here imports the
interpreter; tests compare the two.

``alu`` returns the result and the flags the architecture defines for that
operation, as a ``{name: bit}`` dict.  Flags left undefined are omitted.
"""

from __future__ import annotations


def _signed(v: int, w: int) -> int:
    return v - (1 << w) if v >= 1 << (w - 1) else v


def _parity_even(v: int) -> int:
    return 1 if bin(v & 0xFF).count("1") % 2 == 0 else 0


def _szp(r: int, w: int) -> dict[str, int]:
    return {"ZF": int(r == 0), "SF": int(r >> (w - 1) & 1), "PF": _parity_even(r)}


def alu(op: str, w: int, a: int, b: int, cf_in: int = 0) -> tuple[int, dict[str, int]]:
    """Result and defined flags of ``op a, b`` at width ``w`` bits."""
    mod = 1 << w
    a %= mod
    b %= mod
    if op in ("add", "sub", "cmp"):
        if op == "add":
            exact_u, exact_s = a + b, _signed(a, w) + _signed(b, w)
        else:
            exact_u, exact_s = a - b, _signed(a, w) - _signed(b, w)
        r = exact_u % mod
        flags = _szp(r, w)
        flags["CF"] = int(not 0 <= exact_u < mod)
        flags["OF"] = int(not -(mod >> 1) <= exact_s < (mod >> 1))
        return (a if op == "cmp" else r), flags
    if op in ("and", "or", "xor", "test"):
        r = {"and": a & b, "test": a & b, "or": a | b, "xor": a ^ b}[op]
        flags = _szp(r, w)
        flags.update(CF=0, OF=0)
        return (a if op == "test" else r), flags
    if op in ("inc", "dec"):
        exact_s = _signed(a, w) + (1 if op == "inc" else -1)
        r = (a + (1 if op == "inc" else -1)) % mod
        flags = _szp(r, w)
        flags["OF"] = int(not -(mod >> 1) <= exact_s < (mod >> 1))
        flags["CF"] = cf_in  # preserved
        return r, flags
    if op in ("shl", "shr", "sar"):
        count = b & (0x3F if w == 64 else 0x1F)
        if count == 0:
            return a, {}
        if op == "shl":
            wide = a * (1 << count)
            r = wide % mod
            cf = (wide >> w) & 1 if count <= w else None
        elif op == "shr":
            r = a // (1 << count)
            cf = (a >> (count - 1)) & 1 if count <= w else None
        else:
            s = _signed(a, w)
            r = (s // (1 << count)) % mod  # floor division is an arithmetic shift
            cf = (s >> (count - 1)) & 1 if count <= w else None
        flags = _szp(r, w)
        if cf is not None:
            flags["CF"] = cf
        if count == 1:
            if op == "shl":
                flags["OF"] = (r >> (w - 1) & 1) ^ flags["CF"]
            elif op == "shr":
                flags["OF"] = a >> (w - 1) & 1
            else:
                flags["OF"] = 0
        return r, flags
    raise ValueError(op)


def mul(signed: bool, w: int, a: int, b: int) -> tuple[int, int, dict[str, int]]:
    """One-operand MUL/IMUL: (low half, high half, defined flags CF/OF)."""
    mod = 1 << w
    a %= mod
    b %= mod
    if signed:
        p = _signed(a, w) * _signed(b, w)
        over = not -(mod >> 1) <= p < (mod >> 1)
    else:
        p = a * b
        over = p >= mod
    full = p % (mod * mod)
    return full % mod, full // mod, {"CF": int(over), "OF": int(over)}


def div(w: int, hi: int, lo: int, d: int) -> tuple[int, int] | None:
    """Unsigned DIV of hi:lo by d: (quotient, remainder), or None for #DE."""
    mod = 1 << w
    d %= mod
    if d == 0:
        return None
    n = (hi % mod) * mod + lo % mod
    q, r = divmod(n, d)
    if q >= mod:
        return None
    return q, r


FLAG_BITS = {"CF": 0, "PF": 2, "ZF": 6, "SF": 7, "OF": 11}


def flags_word(flags: dict[str, int]) -> int:
    return sum(bit << FLAG_BITS[n] for n, bit in flags.items())


def defined_mask(flags: dict[str, int]) -> int:
    return sum(1 << FLAG_BITS[n] for n in flags)
