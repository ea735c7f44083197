from .encoding import sha256


class EmptyLeaves(ValueError):
    pass


def merkle_root(leaves) -> bytes:
    """Binary Merkle root; an odd node at the end of a level is promoted unchanged."""
    level = list(leaves)
    if not level:
        raise EmptyLeaves("merkle_root needs at least one leaf")
    while len(level) > 1:
        nxt = [sha256(level[i] + level[i + 1]) for i in range(0, len(level) - 1, 2)]
        if len(level) % 2:
            nxt.append(level[-1])
        level = nxt
    return level[0]
