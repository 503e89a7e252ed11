"""
Nearest-neighbour index over dataset rows using FAISS
"""
import logging

import faiss
import numpy as np

logger = logging.getLogger(__name__)

FIRST_PASS_WIDTH = 32


class PointIndex:
    """
    Exact L2 index over fixed-dimension vectors, keeping each row's position
    in the source dataset
    """

    def __init__(self, dimension):
        """
        Args:
            dimension (int): length of every stored vector
        """
        self.dimension = dimension
        self.index = faiss.IndexFlatL2(dimension)
        self.ids = []

    def __len__(self):
        return self.index.ntotal

    def add(self, vectors, ids=None):
        """
        Add vectors to the index

        Args:
            vectors (np.ndarray): (N, dimension) array
            ids (list, optional): dataset positions; defaults to insertion order

        Returns:
            list: positions of the added vectors
        """
        vectors = np.ascontiguousarray(vectors, dtype=np.float32).reshape(-1, self.dimension)
        if len(vectors) == 0:
            return []
        start = len(self.ids)
        ids = list(range(start, start + len(vectors))) if ids is None else [int(i) for i in ids]
        self.index.add(vectors)
        self.ids.extend(ids)
        return ids

    def search(self, queries, k=5):
        """
        k nearest stored vectors for each query

        Equal distances are ordered by dataset position.

        Returns:
            tuple: (squared distances (Q, k), dataset positions (Q, k))
        """
        queries = np.ascontiguousarray(queries, dtype=np.float32).reshape(-1, self.dimension)
        k = min(k, self.index.ntotal)
        if k == 0:
            return np.empty((len(queries), 0)), np.empty((len(queries), 0), dtype=np.int64)
        distances, rows = self.index.search(queries, k)
        ids = np.asarray(self.ids, dtype=np.int64)[rows]
        order = np.lexsort((ids, distances), axis=1)
        return np.take_along_axis(distances, order, axis=1), np.take_along_axis(ids, order, axis=1)

    def nearest_unique(self, queries):
        """
        Assign every query a distinct stored vector, greedily in query order

        Each query takes its nearest vector not already claimed by an earlier
        query.

        Returns:
            np.ndarray: one dataset position per query
        """
        queries = np.ascontiguousarray(queries, dtype=np.float32).reshape(-1, self.dimension)
        if len(queries) > len(self):
            raise ValueError(f"{len(queries)} queries but only {len(self)} stored vectors")
        taken = set()
        chosen = []
        width = min(len(self), FIRST_PASS_WIDTH)
        _, candidates = self.search(queries, width)
        for q, row in enumerate(candidates):
            pick = next((int(i) for i in row if int(i) not in taken), None)
            if pick is None:
                _, full = self.search(queries[q], len(self))
                pick = next(int(i) for i in full[0] if int(i) not in taken)
            taken.add(pick)
            chosen.append(pick)
        logger.debug("Matched %d queries to unique members (first pass width %d)", len(chosen), width)
        return np.array(chosen, dtype=np.int64)
