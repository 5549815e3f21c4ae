"""Work-chain outlines: the fixed control-flow tree and its execution cursor.

An outline is an ordered tree of steps, while-loops and if/elif/else blocks.
The cursor identifies the next step to execute as a stack of (block path,
index) frames; it is iteration-agnostic (re-entering a while body resets the
frame) and fully JSON-serializable so it can live inside checkpoints.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

from .states import EngineError


class OutlineError(EngineError):
    pass


@dataclass
class Step:
    name: str


@dataclass
class While:
    condition: str
    body: list = field(default_factory=list)


@dataclass
class IfBlock:
    # (condition name | None for else, body); evaluated in order
    branches: list = field(default_factory=list)


def _instruction_name(item) -> str:
    if callable(item):
        return item.__name__
    raise OutlineError(f"outline entries must be step methods or control blocks, "
                       f"got {item!r}")


def _compile_items(items: Sequence) -> list:
    compiled = []
    for item in items:
        if isinstance(item, (Step, While, IfBlock)):
            compiled.append(item)
        elif isinstance(item, _WhileBuilder):
            compiled.append(item.build())
        elif isinstance(item, _IfBuilder):
            compiled.append(item.build())
        else:
            compiled.append(Step(_instruction_name(item)))
    return compiled


class _WhileBuilder:
    def __init__(self, condition):
        self._condition = _instruction_name(condition)
        self._body: list | None = None

    def __call__(self, *items) -> "_WhileBuilder":
        if self._body is not None:
            raise OutlineError("while_ body already defined")
        self._body = _compile_items(items)
        return self

    def build(self) -> While:
        if self._body is None:
            raise OutlineError("while_ requires a body: while_(cond)(steps...)")
        return While(self._condition, self._body)


class _IfBuilder:
    def __init__(self, condition):
        self._branches: list[tuple[str | None, list]] = []
        self._open: str | None = _instruction_name(condition)
        self._closed = False

    def __call__(self, *items) -> "_IfBuilder":
        if self._open is None:
            raise OutlineError("no open conditional branch to attach a body to")
        self._branches.append((self._open, _compile_items(items)))
        self._open = None
        return self

    def elif_(self, condition) -> "_IfBuilder":
        if self._open is not None or self._closed:
            raise OutlineError("misplaced elif_ in outline")
        self._open = _instruction_name(condition)
        return self

    def else_(self, *items) -> "_IfBuilder":
        if self._open is not None or self._closed:
            raise OutlineError("misplaced else_ in outline")
        self._branches.append((None, _compile_items(items)))
        self._closed = True
        return self

    def build(self) -> IfBlock:
        if self._open is not None or not self._branches:
            raise OutlineError("conditional block is missing a body")
        return IfBlock(list(self._branches))


def while_(condition) -> _WhileBuilder:
    return _WhileBuilder(condition)


def if_(condition) -> _IfBuilder:
    return _IfBuilder(condition)


@dataclass
class OutlineProgram:
    root: list = field(default_factory=list)

    def step_names(self) -> set[str]:
        names: set[str] = set()

        def walk(block):
            for instr in block:
                if isinstance(instr, Step):
                    names.add(instr.name)
                elif isinstance(instr, While):
                    walk(instr.body)
                elif isinstance(instr, IfBlock):
                    for _, body in instr.branches:
                        walk(body)

        walk(self.root)
        return names

    def condition_names(self) -> set[str]:
        names: set[str] = set()

        def walk(block):
            for instr in block:
                if isinstance(instr, While):
                    names.add(instr.condition)
                    walk(instr.body)
                elif isinstance(instr, IfBlock):
                    for cond, body in instr.branches:
                        if cond is not None:
                            names.add(cond)
                        walk(body)

        walk(self.root)
        return names

    def resolve_block(self, path: Sequence) -> list:
        """Follow a serialized block path down the tree."""
        block = self.root
        i = 0
        while i < len(path):
            index = path[i]
            marker = path[i + 1]
            instr = block[index]
            if marker == "body":
                if not isinstance(instr, While):
                    raise OutlineError(f"path {path!r} expects a while at {index}")
                block = instr.body
                i += 2
            elif marker == "branch":
                if not isinstance(instr, IfBlock):
                    raise OutlineError(f"path {path!r} expects a conditional at {index}")
                block = instr.branches[path[i + 2]][1]
                i += 3
            else:
                raise OutlineError(f"bad path marker {marker!r}")
        return block

    def validate_against(self, cls) -> None:
        for name in self.step_names() | self.condition_names():
            if not callable(getattr(cls, name, None)):
                raise OutlineError(
                    f"outline references {name!r} which is not a method of "
                    f"{cls.__name__}")


def compile_outline(items: Sequence) -> OutlineProgram:
    return OutlineProgram(_compile_items(items))


class OutlineCursor:
    """Execution position: a stack of frames, each (block path, index)."""

    def __init__(self, frames: list | None = None):
        self.frames: list[list] = frames if frames is not None else [[[], 0]]

    def to_doc(self) -> list:
        return [[list(path), index] for path, index in self.frames]

    @classmethod
    def from_doc(cls, doc: list) -> "OutlineCursor":
        return cls([[list(path), int(index)] for path, index in doc])

    @property
    def done(self) -> bool:
        return not self.frames

    def seek_step(self, program: OutlineProgram,
                  eval_condition: Callable[[str], bool]) -> str | None:
        """Advance to the next Step, evaluating control flow; None at the end.

        While conditions are (re-)evaluated at every loop entry. The cursor is
        left pointing AT the step; call :meth:`advance` after executing it.
        """
        while self.frames:
            path, index = self.frames[-1]
            block = program.resolve_block(path)
            if index >= len(block):
                finished_path = self.frames.pop()[0]
                if not self.frames:
                    return None
                parent_path, parent_index = self.frames[-1]
                parent_block = program.resolve_block(parent_path)
                instr = parent_block[parent_index]
                if isinstance(instr, While) and finished_path[-1:] == ["body"]:
                    if eval_condition(instr.condition):
                        self.frames.append([list(finished_path), 0])
                    else:
                        self.frames[-1][1] += 1
                else:
                    self.frames[-1][1] += 1
                continue
            instr = block[index]
            if isinstance(instr, Step):
                return instr.name
            if isinstance(instr, While):
                if eval_condition(instr.condition):
                    self.frames.append([list(path) + [index, "body"], 0])
                else:
                    self.frames[-1][1] += 1
                continue
            if isinstance(instr, IfBlock):
                chosen = None
                for branch_index, (cond, _) in enumerate(instr.branches):
                    if cond is None or eval_condition(cond):
                        chosen = branch_index
                        break
                if chosen is None:
                    self.frames[-1][1] += 1
                else:
                    self.frames.append([list(path) + [index, "branch", chosen], 0])
                continue
            raise OutlineError(f"unknown outline instruction {instr!r}")
        return None

    def advance(self) -> None:
        """Move past the step the cursor currently points at."""
        if self.frames:
            self.frames[-1][1] += 1
