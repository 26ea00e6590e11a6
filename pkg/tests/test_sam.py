import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from samloop.errors import (
    DuplicateSection,
    FileMissing,
    MalformedMetadata,
    MissingExpectation,
    MultipleRoots,
    TamperDetected,
    UnknownNode,
)
from samloop.sam import (
    SECTION_NAMES,
    MountSpec,
    SamDocument,
    SamNode,
    TaskMetadata,
    assert_unmodified,
    dump_sam,
    extract_expectation,
    load_sam,
    parse_sam,
    render_for_agent,
    validate,
)

TE = "## To-do\nwork\n\n## Expectation\ndone\n"


def tree(doc):
    data = doc.to_dict()
    del data["source_digest"], data["source_path"]
    return data


def test_node_ids_follow_document_order():
    doc = parse_sam("""# R

## To-do
r

## Expectation
r

## A

### To-do
a

### Expectation
a

### A1

#### To-do
a1

#### Expectation
a1

## B

### To-do
b

### Expectation
b
""")
    assert [(n.id, n.title) for n in doc.nodes()] == [
        ("root", "R"), ("root/1", "A"), ("root/1/1", "A1"), ("root/2", "B"),
    ]
    assert doc.parent_of("root/1/1").id == "root/1"
    assert doc.parent_of("root") is None
    with pytest.raises(UnknownNode):
        doc.node("root/9")


def test_sections_in_any_order_and_aliases():
    doc = parse_sam("# T\n\n## Expect\nstop here\n\n## TODO\ngo\n\n## context\nbg\n")
    assert (doc.root.todo, doc.root.expectation, doc.root.context) == ("go", "stop here", "bg")


def test_expectation_is_verbatim():
    body = "- `out.csv` has **3** columns\n- no NaN values\n\n    indented block stays"
    doc = parse_sam(f"# T\n\n## To-do\nx\n\n## Expectation\n{body}\n")
    assert extract_expectation(doc, "root") == body


def test_metadata_defaults_and_values():
    assert parse_sam("# T\n\n" + TE).metadata == TaskMetadata()
    doc = parse_sam("```meta\nmodel: big\ndifficulty: 3\nmounts: [/a:/b:ro]\n# comment\n```\n\n# T\n\n" + TE)
    m = doc.metadata
    assert (m.model_preference, m.difficulty_hint, m.mounts) == ("big", 3, (MountSpec("/a", "/b", "ro"),))
    assert m.explicit_keys == ("model", "difficulty", "mounts")


def test_malformed_metadata_reports_line():
    with pytest.raises(MalformedMetadata) as info:
        parse_sam("```meta\nmax_iterations: 2\nnetwork: yes\n```\n\n# T\n\n" + TE)
    assert info.value.line == 3


def test_errors_name_the_node():
    with pytest.raises(MissingExpectation) as info:
        parse_sam("# T\n\n" + TE + "\n## Child\n\n### To-do\nc\n")
    assert info.value.node_id == "root/1"
    with pytest.raises(DuplicateSection):
        parse_sam("# T\n\n" + TE + "\n## Expectation\nagain\n")
    with pytest.raises(MultipleRoots) as info:
        parse_sam("# A\n\n" + TE + "# B\n\n" + TE)
    assert info.value.line == 8


def test_validate_flags_every_problem():
    doc = parse_sam("```meta\nfoo: 1\nbar: 2\nmounts: rel:/x:ro\n```\n\nintro\n\n# T\n\nstray\n\n" + TE)
    rules = sorted(v.rule for v in validate(doc))
    assert rules == ["RelativeMountPath", "StrayText", "StrayText", "UnknownKey", "UnknownKey"]


def test_render_for_agent_lists_children():
    doc = parse_sam("# R\n\n" + TE + "\n## Kid\n\n### To-do\nk\n\n### Expectation\nk\n")
    text = render_for_agent(doc, "root", include_children=True, statuses={"root/1": "done"})
    assert "- root/1 Kid [done]" in text
    assert text.startswith("# R [root]\n")


def test_assert_unmodified(tmp_path):
    path = tmp_path / "t.md"
    path.write_text("# T\n\n" + TE)
    doc = load_sam(path)
    assert assert_unmodified(doc) == doc.source_digest
    path.write_text("# T\n\n" + TE + "\n")
    with pytest.raises(TamperDetected):
        assert_unmodified(doc)
    path.unlink()
    with pytest.raises(FileMissing):
        assert_unmodified(doc)


def test_digest_covers_bytes_not_tree():
    a, b = parse_sam("# T\n\n" + TE), parse_sam("# T\n\n\n" + TE)
    assert tree(a) == tree(b)
    assert a.source_digest != b.source_digest


# -- properties -------------------------------------------------------------

_word = st.text(alphabet="abcdefghijklmnopqrstuvwxyzABCDEFGHIJ0123456789", min_size=1, max_size=8)
_line = st.lists(_word, min_size=1, max_size=5).map(" ".join)
_title = _line.filter(lambda t: t.lower() not in SECTION_NAMES)
_body = st.lists(_line, min_size=1, max_size=3).map("\n".join)


@st.composite
def _nodes(draw, node_id="root", depth=0):
    kids = draw(st.integers(0, 2 if depth < 2 else 0))
    return SamNode(
        id=node_id,
        title=draw(_title),
        todo=draw(_body),
        expectation=draw(_body),
        context=draw(st.one_of(st.none(), _body)),
        children=tuple(draw(_nodes(f"{node_id}/{i + 1}", depth + 1)) for i in range(kids)),
    )


_meta = st.builds(
    lambda iters, gpu, skills: TaskMetadata(
        max_iterations=iters or 200, gpu=bool(gpu), skills=tuple(skills),
        explicit_keys=tuple(k for k, v in (("max_iterations", iters), ("gpu", gpu), ("skills", skills)) if v),
    ),
    st.one_of(st.none(), st.integers(1, 500)),
    st.one_of(st.none(), st.just(True)),
    st.lists(st.sampled_from(["slurm", "common_env", "x"]), max_size=2, unique=True),
)


@settings(max_examples=200, deadline=None)
@given(root=_nodes(), meta=_meta, level=st.integers(1, 3))
def test_dump_then_parse_gives_the_same_tree(root, meta, level):
    doc = SamDocument(root=root, metadata=meta, source_digest="", source_path="<memory>", heading_level=level)
    text = dump_sam(doc)
    again = parse_sam(text)
    assert tree(again) == tree(doc)
    assert dump_sam(again) == text
    assert validate(again) == []


@settings(max_examples=100, deadline=None)
@given(root=_nodes(), crlf=st.booleans())
def test_parse_is_deterministic(root, crlf):
    text = dump_sam(SamDocument(root=root, metadata=TaskMetadata(), source_digest="", source_path=""))
    if crlf:
        text = text.replace("\n", "\r\n")
    assert parse_sam(text).canonical_json() == parse_sam(text).canonical_json()
    assert tree(parse_sam(text)) == tree(parse_sam(text.replace("\r\n", "\n")))
