//! One-step generation and its simulator-feedback loop.

use super::{knowledge, subgoal_text, FeedbackSource, Generator, Scheme, SchemeError, SchemeResult};
use crate::backends::Query;
use crate::domain::{goal_satisfied, DomainSpec, Goal, WorldState};
use crate::sim::{simulate, FailureReason};
use crate::validation::{check_exec, evaluate_completion, MetricsRecord};

impl Generator<'_> {
    pub(crate) fn tree_prompt(
        &self,
        subgoal: &Goal,
        state: &WorldState,
        domain: &DomainSpec,
        feedback: &str,
    ) -> Result<String, SchemeError> {
        let (domain_text, state_text) = knowledge(domain, state);
        self.render(
            "one_step",
            &[
                ("domain", &domain_text),
                ("state", &state_text),
                ("format_rules", self.config.templates.get("format_rules")),
                ("example", self.config.templates.get("example")),
                ("subgoal", &subgoal_text(subgoal)),
                ("feedback", feedback),
            ],
        )
    }

    /// Single prompt, single completion; accepted iff the completion passes
    /// the format check.
    pub fn one_step(&self, subgoal: &Goal, initial: &WorldState, domain: &DomainSpec) -> SchemeResult {
        let mut run = self.start(Scheme::OneStep, subgoal, domain);
        let prompt = match self.tree_prompt(subgoal, initial, domain, "") {
            Ok(p) => p,
            Err(e) => return run.finish(Err(e), MetricsRecord::default()),
        };
        let query = Query::GenerateTree {
            goal: subgoal,
            state: initial,
            domain,
        };
        let completion = match run.call("generate_tree", prompt, query) {
            Ok(c) => c,
            Err(e) => return run.finish(Err(e), MetricsRecord::default()),
        };
        let metrics = evaluate_completion(&completion.text, initial, subgoal, domain);
        let exec = check_exec(&completion.text, domain);
        run.candidate(&completion.text, exec.tree.as_ref(), exec.pass);
        match exec.tree {
            Some(tree) if exec.pass => {
                let trace = simulate(&tree, initial, domain, self.config.tick_budget);
                run.simulated(&trace);
                run.finish(Ok(tree), metrics)
            }
            _ => {
                let codes: Vec<String> = exec.report.violations.iter().map(|v| v.detail.clone()).collect();
                run.finish(Err(SchemeError::ExecFailed(codes.join("; "))), metrics)
            }
        }
    }

    /// Generate, simulate, and on failure regenerate with the failure-reason
    /// sentences appended to the prompt. Stops at the first tree that
    /// simulates to SUCCESS and reaches the subgoal.
    pub fn iterative(&self, subgoal: &Goal, initial: &WorldState, domain: &DomainSpec) -> SchemeResult {
        let mut run = self.start(Scheme::Iterative, subgoal, domain);
        let rounds = self.config.max_rounds.max(1);
        let mut notes: Vec<String> = Vec::new();
        let mut metrics = MetricsRecord::default();
        for _ in 0..rounds {
            let prompt = match self
                .feedback_block("feedback", &notes)
                .and_then(|fb| self.tree_prompt(subgoal, initial, domain, &fb))
            {
                Ok(p) => p,
                Err(e) => return run.finish(Err(e), metrics),
            };
            let query = Query::GenerateTree {
                goal: subgoal,
                state: initial,
                domain,
            };
            let completion = match run.call("generate_tree", prompt, query) {
                Ok(c) => c,
                Err(e) => return run.finish(Err(e), metrics),
            };
            metrics = evaluate_completion(&completion.text, initial, subgoal, domain);
            let exec = check_exec(&completion.text, domain);
            run.candidate(&completion.text, exec.tree.as_ref(), exec.pass);
            let reasons = match exec.tree {
                Some(tree) if exec.pass => {
                    let trace = simulate(&tree, initial, domain, self.config.tick_budget);
                    run.simulated(&trace);
                    let reached = goal_satisfied(&trace.final_state, subgoal).unwrap_or(false);
                    if trace.succeeded() && reached {
                        return run.finish(Ok(tree), metrics);
                    }
                    vec![trace.failure_reason.unwrap_or(FailureReason::GoalNotReached)]
                }
                _ => exec.failure_reasons(),
            };
            for r in reasons {
                let sentence = r.feedback_sentence().to_string();
                run.note(FeedbackSource::Simulator, &sentence);
                if !notes.contains(&sentence) {
                    notes.push(sentence);
                }
            }
        }
        run.finish(Err(SchemeError::RoundsExhausted { rounds }), metrics)
    }
}
