"""Fixed-budget rehearsal memory with reservoir bookkeeping."""

from __future__ import annotations

import numpy as np
import torch

from .errors import EmptyMemory, InvalidArgument


class MemoryBuffer:
    """Exemplar store of at most ``budget`` (image, label, task_id) entries.

    ``policy="reservoir"`` keeps a uniform sample of every candidate ever
    offered. ``policy="class_balanced"`` keeps an equal share per class,
    evicting the oldest exemplar of the largest class when full.
    """

    def __init__(self, budget=1024, rng_seed=0, policy="reservoir"):
        if budget < 1:
            raise InvalidArgument("budget must be >= 1")
        if policy not in ("reservoir", "class_balanced"):
            raise InvalidArgument(f"unknown memory policy {policy!r}")
        self.budget = int(budget)
        self.policy = policy
        self.rng_seed = rng_seed
        self.rng = np.random.default_rng(rng_seed)
        self.seen_count = 0
        self.images = []
        self.labels = []
        self.task_ids = []

    def __len__(self):
        return len(self.labels)

    @property
    def entries(self):
        return list(zip(self.images, self.labels, self.task_ids))

    def offer(self, image, label, task_id):
        """Offer one candidate; returns the slot it landed in, or None if discarded."""
        self.seen_count += 1
        image = torch.as_tensor(image).detach().clone()
        item = (image, int(label), int(task_id))
        if len(self) < self.budget:
            self._append(item)
            return len(self) - 1
        if self.policy == "reservoir":
            slot = int(self.rng.integers(self.seen_count))
            if slot < self.budget:
                self._put(slot, item)
                return slot
            return None
        return self._balanced_insert(item)

    def offer_many(self, images, labels, task_id):
        for image, label in zip(images, labels):
            self.offer(image, label, task_id)
        return self

    def _append(self, item):
        self.images.append(item[0])
        self.labels.append(item[1])
        self.task_ids.append(item[2])

    def _put(self, slot, item):
        self.images[slot], self.labels[slot], self.task_ids[slot] = item

    def _balanced_insert(self, item):
        counts = {}
        for lab in self.labels:
            counts[lab] = counts.get(lab, 0) + 1
        largest = max(counts.values())
        if counts.get(item[1], 0) >= largest:
            return None
        victim_class = min(c for c, n in counts.items() if n == largest)
        slot = self.labels.index(victim_class)
        del self.images[slot], self.labels[slot], self.task_ids[slot]
        self._append(item)
        return len(self) - 1

    def sample(self, batch_size, seed):
        """Uniform draw of ``batch_size`` entries; without replacement when possible.

        ``seed`` may be an int or a ``numpy.random.Generator``.
        """
        if not len(self):
            raise EmptyMemory("cannot sample from an empty memory buffer")
        rng = np.random.default_rng(seed)
        replace = batch_size > len(self)
        idx = rng.choice(len(self), size=batch_size, replace=replace)
        images = torch.stack([self.images[i] for i in idx])
        labels = torch.tensor([self.labels[i] for i in idx], dtype=torch.long)
        return images, labels

    def tasks_present(self):
        return sorted(set(self.task_ids))

    def state_dict(self):
        return {
            "budget": self.budget,
            "policy": self.policy,
            "rng_seed": self.rng_seed,
            "rng_state": self.rng.bit_generator.state,
            "seen_count": self.seen_count,
            "images": torch.stack(self.images) if self.images else None,
            "labels": list(self.labels),
            "task_ids": list(self.task_ids),
        }

    @classmethod
    def from_state_dict(cls, state):
        buf = cls(state["budget"], state["rng_seed"], state["policy"])
        buf.rng.bit_generator.state = state["rng_state"]
        buf.seen_count = state["seen_count"]
        if state["images"] is not None:
            buf.images = list(state["images"].unbind(0))
        buf.labels = list(state["labels"])
        buf.task_ids = list(state["task_ids"])
        return buf
