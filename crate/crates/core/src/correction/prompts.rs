//! Prompt templates and their rendering.
//!
//! Templates may use `{TEXT}`, `{ENTITY1}`, `{ENTITY2}`, `{LABELS}` and
//! `{PREVIOUS}`; source descriptions additionally use `{ANSWER}`.

use serde::{Deserialize, Serialize};

use crate::dataset::{ClassIndex, ClassSpace, Instance};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptBundle {
    pub problem_setting: String,
    pub response_regularization: String,
    pub task_instance_template: String,
    pub followup_self_verify: String,
    pub followup_rag_preamble: String,
}

impl Default for PromptBundle {
    fn default() -> Self {
        Self {
            problem_setting: "You label short texts for a classification task. Read the input and pick the answer that fits it best.".into(),
            response_regularization: "Begin your reply with exactly one of these answers: {LABELS}. If the input does not let you decide, begin your reply with the word unsure instead.".into(),
            task_instance_template: "Input: {TEXT}\nAnswer:".into(),
            followup_self_verify: "You answered {PREVIOUS} before. Check that answer against the input once more and reply again with one of: {LABELS}.".into(),
            followup_rag_preamble: "Some outside references have something to say about this input:".into(),
        }
    }
}

/// Values substituted into templates for one instance.
#[derive(Debug, Clone)]
pub struct TemplateContext<'a> {
    pub inst: &'a Instance,
    pub space: &'a ClassSpace,
    pub previous: Option<ClassIndex>,
}

impl TemplateContext<'_> {
    pub fn render(&self, template: &str) -> String {
        self.render_with_answer(template, None)
    }

    pub fn render_with_answer(&self, template: &str, answer: Option<ClassIndex>) -> String {
        let entity = |i: usize| self.inst.entities.get(i).map_or("", String::as_str);
        let name = |c: Option<ClassIndex>| c.map_or("unsure", |c| self.space.name(c));
        template
            .replace("{TEXT}", self.inst.text.as_deref().unwrap_or(""))
            .replace("{ENTITY1}", entity(0))
            .replace("{ENTITY2}", entity(1))
            .replace("{LABELS}", &self.space.labels().join(", "))
            .replace("{PREVIOUS}", name(self.previous))
            .replace("{ANSWER}", name(answer))
    }
}

impl PromptBundle {
    /// System message: problem setting followed by response regularization.
    pub fn system_message(&self, ctx: &TemplateContext<'_>) -> String {
        format!("{}\n{}", ctx.render(&self.problem_setting), ctx.render(&self.response_regularization))
    }

    pub fn task_message(&self, ctx: &TemplateContext<'_>) -> String {
        ctx.render(&self.task_instance_template)
    }
}
