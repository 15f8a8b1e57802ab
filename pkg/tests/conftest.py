import dataclasses

import pytest

from guimem.core import Difficulty, Provenance, TaskQuery
from guimem.simenv import SimWorld
from guimem.store import MediaStore
from guimem.worlds import make_shop_world, make_wiki_world


@pytest.fixture
def media(tmp_path):
    return MediaStore(tmp_path / "media")


@pytest.fixture
def shop_world():
    return make_shop_world()


@pytest.fixture
def wiki_world():
    return make_wiki_world()


def task_query_for(world, sim_task_id: str) -> TaskQuery:
    """TaskQuery mirroring one of a world's sim tasks (same id)."""
    sim_task = world.tasks[sim_task_id]
    return TaskQuery(id=sim_task_id, env_id=world.id, text=sim_task.text,
                     expected_outcome=sim_task.expected_outcome,
                     difficulty=Difficulty.MEDIUM,
                     provenance=Provenance.SYNTHESIZED, category=world.category)


def sim_env_for(world, media: MediaStore, task_id: str,
                alias: str | None = None) -> SimWorld:
    """SimWorld for one episode; `alias` registers the task under a second id."""
    if alias and alias not in world.tasks:
        source = world.tasks[task_id]
        world = dataclasses.replace(world, tasks={
            **world.tasks, alias: dataclasses.replace(source, id=alias)})
    return SimWorld(world, media, env_id=world.id)
