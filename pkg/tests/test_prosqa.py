import json
import math
import re
from collections import Counter

import networkx as nx
import numpy as np
import pytest

from latent_lab.dataset import load_examples
from latent_lab.errors import ConfigError
from latent_lab.prosqa import (
    ConceptGraph,
    GenerationSettings,
    ProblemInstance,
    build_graph,
    concept_inventory,
    generate_dataset,
    generate_instance,
    instance_rng,
    oracle_shortest_paths,
    sample_poisson,
    select_question,
    weighted_sample_without_replacement,
)

SMALL = GenerationSettings(n_nodes=10, min_path=2, max_path=4)
STATEMENT = re.compile(r"^(Every [a-z]+|[A-Z][a-z]+) is a [a-z]+pus\.$")


def bfs_labels(graph):
    from_zero = set(nx.descendants(graph.digraph, 0)) | {0}
    from_one = set(nx.descendants(graph.digraph, 1)) | {1}
    return {n: (n in from_zero) * 1 + (n in from_one) * 2 for n in range(graph.n_nodes)}


def test_poisson_moments():
    """Test the empirical mean and zero probability of Poisson draws."""
    rng = np.random.default_rng(0)
    draws = np.array([sample_poisson(rng, 1.5) for _ in range(100_000)])
    assert abs(draws.mean() - 1.5) < 0.02
    assert abs((draws == 0).mean() - math.exp(-1.5)) < 0.01


def test_poisson_rate_must_be_positive():
    """Test the Poisson rate check."""
    with pytest.raises(ConfigError):
        sample_poisson(np.random.default_rng(0), 0.0)


def test_weighted_sampling_takes_everything():
    """Test that asking for every candidate returns the whole set."""
    chosen = weighted_sample_without_replacement([3, 5, 8], [1.0, 2.5, 4.0], 3, np.random.default_rng(1))
    assert sorted(chosen) == [3, 5, 8]


def test_weighted_sampling_dominant_weight():
    """Test that an overwhelming weight is almost always drawn first."""
    rng = np.random.default_rng(2)
    hits = sum(weighted_sample_without_replacement([0, 1, 2], [1.0, 1e6, 1.0], 1, rng) == [1] for _ in range(10_000))
    assert hits / 10_000 >= 0.999


def test_weighted_sampling_uniform_frequencies():
    """Test that uniform weights give uniform inclusion."""
    rng = np.random.default_rng(3)
    trials = 30_000
    counts = Counter(x for _ in range(trials) for x in weighted_sample_without_replacement([0, 1, 2, 3], [1.0] * 4, 2, rng))
    sigma = math.sqrt(trials * 0.5 * 0.5)
    for node in range(4):
        assert abs(counts[node] - trials / 2) < 3 * sigma


@pytest.mark.parametrize(
    "weights, n",
    [([1.0, -1.0], 1), ([1.0, 1.0], 3)],
)
def test_weighted_sampling_errors(weights, n):
    """Test negative weights and oversized draws."""
    with pytest.raises(ConfigError):
        weighted_sample_without_replacement([0, 1], weights, n, np.random.default_rng(0))


def test_smallest_graph():
    """Test that a 3-node graph adds one node under the seeds."""
    graph = build_graph(3, np.random.default_rng(4))
    assert all(src in (0, 1) and dst == 2 for src, dst in graph.edges)
    assert graph.labels == bfs_labels(graph)


def test_graph_needs_three_nodes():
    """Test the node count check."""
    with pytest.raises(ConfigError):
        build_graph(2, np.random.default_rng(0))


def test_labels_and_depth_match_structure():
    """Test incremental labels against BFS reachability, and creation depth."""
    rng = np.random.default_rng(5)
    for _ in range(300):
        graph = build_graph(25, rng)
        assert nx.is_directed_acyclic_graph(graph.digraph)
        assert graph.labels == bfs_labels(graph)
        for node in range(graph.n_nodes):
            parents = list(graph.digraph.predecessors(node))
            assert graph.depth[node] == (1 + max(graph.depth[p] for p in parents) if parents else 0)
        assert sorted(n for group in graph.groups.values() for n in group) == list(range(graph.n_nodes))


def test_question_rejected_without_incorrect_leaf():
    """Test rejection of a graph with no leaf reachable only from node 1."""
    graph = ConceptGraph(n_nodes=4, edges=[(0, 2), (2, 3)], labels={0: 1, 1: 2, 2: 1, 3: 1})
    assert select_question(graph, np.random.default_rng(0)) is None


def test_question_never_uses_shared_leaves():
    """Test that a leaf reachable from both seeds is never the incorrect option."""
    graph = ConceptGraph(
        n_nodes=6,
        edges=[(0, 2), (2, 3), (1, 4), (2, 5), (1, 5)],
        labels={0: 1, 1: 2, 2: 1, 3: 1, 4: 2, 5: 3},
    )
    rng = np.random.default_rng(0)
    for _ in range(20):
        assert select_question(graph, rng) == (0, 3, 4)


def test_generated_instances_are_valid():
    """Test reachability, path and rendering of generated instances."""
    for index in range(300):
        instance, _ = generate_instance(17, "train", index)
        graph = instance.graph
        assert graph.reachable(instance.entity, instance.correct)
        assert not graph.reachable(instance.entity, instance.incorrect)
        shortest = oracle_shortest_paths(graph, instance.entity, instance.correct)
        assert 2 <= shortest.length <= 6
        assert instance.path in shortest.paths
        assert set(instance.options) == {instance.correct, instance.incorrect}
        assert len(set(graph.names.values())) == graph.n_nodes


def test_render_format():
    """Test statement, question, step and answer text."""
    instance, _ = generate_instance(3, "test", 0)
    example = instance.example
    graph, names = instance.graph, instance.graph.names
    *statements, question = re.findall(r"[^.?]+[.?]", example.question)
    assert len(statements) == len(graph.edges)
    assert all(STATEMENT.match(s.strip()) for s in statements)
    entity = names[instance.entity]
    first, second = (names[n] for n in instance.options)
    assert question.strip() == f"Is {entity} a {first} or {second}?"
    assert example.answer == f"{entity} is a {names[instance.correct]}."
    assert len(example.steps) == len(instance.path) - 1
    assert example.steps[0] == f"{entity} is a {names[instance.path[1]]}."
    assert all(step.startswith("Every ") for step in example.steps[1:])


def test_parse_back_reconstructs_graph():
    """Test that re-parsing an example recovers edges, options and path."""
    for index in range(50):
        original, _ = generate_instance(9, "val", index)
        parsed = ProblemInstance.from_example(original.example)
        names, back = original.graph.names, parsed.graph.names
        assert {(names[a], names[b]) for a, b in original.graph.edges} == {(back[a], back[b]) for a, b in parsed.graph.edges}
        assert back[parsed.correct] == names[original.correct]
        assert back[parsed.incorrect] == names[original.incorrect]
        assert [back[n] for n in parsed.path] == [names[n] for n in original.path]
        assert parsed.example == original.example


def brute_force_shortest(graph, src, dst):
    if src == dst:
        return 0, {(src,)}
    paths = [tuple(p) for p in nx.all_simple_paths(graph.digraph, src, dst)]
    if not paths:
        return None, set()
    best = min(len(p) for p in paths)
    return best - 1, {p for p in paths if len(p) == best}


def test_oracle_matches_brute_force():
    """Test shortest-path enumeration against exhaustive simple-path search."""
    rng = np.random.default_rng(6)
    for _ in range(100):
        graph = build_graph(int(rng.integers(3, 13)), rng)
        src, dst = (int(x) for x in rng.integers(0, graph.n_nodes, size=2))
        result = oracle_shortest_paths(graph, src, dst)
        length, paths = brute_force_shortest(graph, src, dst)
        assert result.length == length
        assert set(result.paths) == paths


def test_oracle_edge_cases():
    """Test self paths and unreachable pairs."""
    graph = ConceptGraph(n_nodes=3, edges=[(0, 2)])
    assert oracle_shortest_paths(graph, 1, 1).paths == ((1,),)
    assert oracle_shortest_paths(graph, 1, 1).length == 0
    assert oracle_shortest_paths(graph, 1, 2).length is None


def test_instances_are_pure_functions_of_their_index():
    """Test per-instance determinism and independent split streams."""
    first, _ = generate_instance(11, "train", 4, SMALL)
    again, _ = generate_instance(11, "train", 4, SMALL)
    assert first.example == again.example
    assert instance_rng(11, "train", 0).random() != instance_rng(11, "val", 0).random()


def test_concept_inventory_is_unique():
    """Test the pseudoword pool."""
    inventory = concept_inventory()
    assert len(inventory) == len(set(inventory)) == 2500
    assert all(word.endswith("pus") for word in inventory)


def test_generate_dataset_parallel_matches_serial(tmp_path):
    """Test that worker processes write the same files as serial generation."""
    sizes = {"train": 6, "val": 2, "test": 3}
    serial = generate_dataset(sizes, 21, tmp_path / "serial", SMALL, workers=1)
    generate_dataset(sizes, 21, tmp_path / "parallel", SMALL, workers=2)
    for split in sizes:
        assert (tmp_path / "serial" / f"{split}.jsonl").read_text() == (tmp_path / "parallel" / f"{split}.jsonl").read_text()
        assert len(load_examples(tmp_path / "serial" / f"{split}.jsonl")) == sizes[split]
    stats = json.loads((tmp_path / "serial" / "stats.json").read_text())
    assert stats["sizes"] == sizes
    assert stats["mean_nodes"] == 10
    assert stats["master_seed"] == 21
    assert 0 <= serial.rejection_rate < 1


def test_generate_dataset_rejects_bad_sizes(tmp_path):
    """Test non-positive sizes and unknown split names."""
    with pytest.raises(ConfigError):
        generate_dataset({"train": 0}, 0, tmp_path)
    with pytest.raises(ConfigError):
        generate_dataset({"dev": 3}, 0, tmp_path)


def test_bad_poisson_rate_is_a_config_error(tmp_path):
    """Test that an invalid child-count rate surfaces as a configuration error."""
    with pytest.raises(ConfigError, match="Poisson rate"):
        generate_dataset({"train": 2}, 0, tmp_path, GenerationSettings(n_nodes=10, poisson_lambda=0.0))


@pytest.mark.slow
def test_ten_thousand_instances_are_valid():
    """Test validity and option balance over 10,000 instances."""
    first = 0
    for index in range(10_000):
        instance, _ = generate_instance(0, "train", index)
        assert instance.graph.reachable(0, instance.correct)
        assert not instance.graph.reachable(0, instance.incorrect)
        assert instance.graph.labels == bfs_labels(instance.graph)
        first += instance.options[0] == instance.correct
    assert abs(first / 10_000 - 0.5) <= 0.02


@pytest.mark.slow
def test_population_statistics(tmp_path):
    """Test graph statistics against the reference table."""
    stats = generate_dataset({"train": 10_000}, 0, tmp_path, workers=4)
    assert abs(stats.mean_nodes - 23) <= 3
    assert abs(stats.mean_edges - 36) <= 6
    assert abs(stats.mean_shortest_path_length - 3.8) <= 0.5
    assert abs(stats.mean_shortest_path_count - 1.6) <= 0.4
