"""Счётчиковый генератор случайных чисел."""

import zlib
from dataclasses import dataclass

import numpy as np

_KEY_MASK = (1 << 64) - 1


@dataclass
class RngState:
    """Состояние генератора: ключ Philox и номер следующего вытягивания.

    Каждое вытягивание получает собственный блок счётчика (номер в старшем
    слове), поэтому поток зависит только от ``(seed, counter)``.
    Дочерние потоки (``split``) не сдвигают родительский счётчик.
    """

    seed: int
    counter: int = 0

    def __post_init__(self) -> None:
        self.seed = int(self.seed) & _KEY_MASK
        self.counter = int(self.counter)

    def split(self, name: str) -> "RngState":
        """Независимый именованный поток."""
        entropy = [self.seed, zlib.crc32(name.encode("utf-8"))]
        child = np.random.SeedSequence(entropy).generate_state(1, dtype=np.uint64)
        return RngState(seed=int(child[0]))

    def fold_in(self, index: int) -> "RngState":
        """Независимый поток с целочисленным номером (фолды, эпохи)."""
        return self.split(f"#{int(index)}")

    def next_generator(self) -> np.random.Generator:
        """Генератор для одного вытягивания; счётчик сдвигается на единицу."""
        bit_gen = np.random.Philox(key=self.seed, counter=[0, 0, 0, self.counter])
        self.counter += 1
        return np.random.Generator(bit_gen)

    def uniform(
        self, shape: tuple[int, ...], low: float = 0.0, high: float = 1.0
    ) -> np.ndarray:
        return self.next_generator().uniform(low, high, size=shape)

    def normal(self, shape: tuple[int, ...], std: float = 1.0) -> np.ndarray:
        return self.next_generator().normal(0.0, std, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self.next_generator().permutation(n)

    def copy(self) -> "RngState":
        return RngState(seed=self.seed, counter=self.counter)
