import pytest

from creative_dp_utils.datamodel import Item
from creative_dp_utils.llm.prompt_templates import (
    EMPTY_FIELD,
    TEMPLATE_NAMES,
    TITLE_GENERATION,
    PromptTemplate,
    TemplateRenderError,
    format_history,
    format_optional,
    format_selling_points,
    load_template,
    load_templates,
    template_task,
)


def test_every_template_loads_and_names_its_task():
    templates = load_templates()
    assert set(templates) == set(TEMPLATE_NAMES)
    for name, template in templates.items():
        values = {placeholder: "x" for placeholder in template.placeholders}
        assert template_task(template.render(**values)) == name


def test_title_generation_placeholders():
    assert load_template(TITLE_GENERATION).placeholders == {"interests", "ad_title", "selling_points", "query"}


def test_doubled_braces_render_literally():
    rendered = load_template(TITLE_GENERATION).render(interests="i", ad_title="a", selling_points="s", query="q")
    assert '{"selected_user_traits"' in rendered


def test_render_reports_missing_values():
    template = PromptTemplate(name="t", text="{a} and {b}")
    with pytest.raises(TemplateRenderError) as excinfo:
        template.render(a="1")
    assert excinfo.value.missing == ["b"]


def test_digest_changes_with_text():
    assert PromptTemplate("t", "one").sha256 != PromptTemplate("t", "two").sha256


def test_unknown_template_name():
    with pytest.raises(ValueError):
        load_template("not_a_template")


def test_template_directory_override(tmp_path):
    (tmp_path / "gsb_judge.txt").write_text("### task: gsb_judge\n{title_a} vs {title_b}")
    assert load_template("gsb_judge", tmp_path).placeholders == {"title_a", "title_b"}


def test_formatters():
    history = [Item(item_id="1", title="mug", attributes=[("color", "red")]), Item(item_id="2", title="cup")]
    assert format_history(history) == "1. mug ; color: red\n2. cup"
    assert format_selling_points(["cheap", "red"]) == "- cheap\n- red"
    assert format_selling_points([]) == EMPTY_FIELD
    assert format_optional(None) == EMPTY_FIELD
    assert format_optional("hiking") == "hiking"
