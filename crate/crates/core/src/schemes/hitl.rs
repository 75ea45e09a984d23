//! Human-in-the-loop generation: bullet plan, tree, simulation, then a
//! feedback decision from the operator.

use std::collections::VecDeque;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{knowledge, subgoal_text, EventKind, FeedbackSource, Generator, Scheme, SchemeError, SchemeResult, SessionStatus};
use crate::backends::Query;
use crate::bt::BehaviorTree;
use crate::domain::{DomainSpec, Goal, WorldState};
use crate::sim::{simulate, SimTrace};
use crate::validation::{check_exec, evaluate_completion, MetricsRecord};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "text", rename_all = "snake_case")]
pub enum Feedback {
    Accept,
    Comment(String),
    Abort,
}

impl Feedback {
    /// `accept` and `abort` (any case) are decisions; anything else is a
    /// comment.
    pub fn parse(text: &str) -> Self {
        match text.trim().to_lowercase().as_str() {
            "accept" | "a" | "ok" => Feedback::Accept,
            "abort" | "q" | "quit" => Feedback::Abort,
            _ => Feedback::Comment(text.trim().to_string()),
        }
    }
}

/// What the operator sees before deciding.
#[derive(Debug, Clone, Copy)]
pub struct FeedbackRequest<'r> {
    pub session_id: &'r str,
    pub version: usize,
    pub raw: &'r str,
    pub tree: Option<&'r BehaviorTree>,
    pub trace: Option<&'r SimTrace>,
    pub bullet_plan: &'r str,
}

pub trait FeedbackChannel {
    /// Blocks until the operator answers. `None` means the channel closed.
    fn request(&mut self, req: &FeedbackRequest<'_>) -> Option<Feedback>;
}

/// Answers from a fixed queue; closes when the queue runs out.
#[derive(Debug, Clone, Default)]
pub struct ScriptedFeedback {
    queue: VecDeque<Feedback>,
    /// Candidate versions that were presented, in order.
    pub presented: Vec<usize>,
}

impl ScriptedFeedback {
    pub fn new(answers: impl IntoIterator<Item = Feedback>) -> Self {
        ScriptedFeedback {
            queue: answers.into_iter().collect(),
            presented: Vec::new(),
        }
    }
}

impl FeedbackChannel for ScriptedFeedback {
    fn request(&mut self, req: &FeedbackRequest<'_>) -> Option<Feedback> {
        self.presented.push(req.version);
        self.queue.pop_front()
    }
}

impl Generator<'_> {
    pub fn hitl(
        &self,
        subgoal: &Goal,
        initial: &WorldState,
        domain: &DomainSpec,
        channel: &mut dyn FeedbackChannel,
    ) -> SchemeResult {
        let mut run = self.start(Scheme::Hitl, subgoal, domain);
        let (domain_text, state_text) = knowledge(domain, initial);
        let goal_text = subgoal_text(subgoal);

        let plan_prompt = match self.render(
            "bullet_plan",
            &[("domain", &domain_text), ("state", &state_text), ("subgoal", &goal_text)],
        ) {
            Ok(p) => p,
            Err(e) => return run.finish(Err(e), MetricsRecord::default()),
        };
        let query = Query::BulletPlan {
            goal: subgoal,
            state: initial,
            domain,
        };
        let bullet_plan = match run.call("bullet_plan", plan_prompt, query) {
            Ok(c) => c.text,
            Err(e) => return run.finish(Err(e), MetricsRecord::default()),
        };
        run.session.bullet_plan = Some(bullet_plan.clone());

        let mut comments: Vec<String> = Vec::new();
        let mut metrics = MetricsRecord::default();
        for _ in 0..self.config.hitl_max_rounds.max(1) {
            let prompt = match self.feedback_block("human_feedback", &comments).and_then(|fb| {
                self.render(
                    "hitl_tree",
                    &[
                        ("domain", &domain_text),
                        ("state", &state_text),
                        ("format_rules", self.config.templates.get("format_rules")),
                        ("example", self.config.templates.get("example")),
                        ("subgoal", &goal_text),
                        ("bullet_plan", bullet_plan.trim_end()),
                        ("feedback", &fb),
                    ],
                )
            }) {
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
            let version = run.candidate(&completion.text, exec.tree.as_ref(), exec.pass);
            let trace = exec.tree.as_ref().map(|t| {
                let trace = simulate(t, initial, domain, self.config.tick_budget);
                run.simulated(&trace);
                trace
            });

            run.session.status = SessionStatus::AwaitingFeedback;
            run.emit(EventKind::FeedbackRequested, json!({"version": version}));
            let waiting = Instant::now();
            let answer = channel.request(&FeedbackRequest {
                session_id: &run.session.id,
                version,
                raw: &completion.text,
                tree: exec.tree.as_ref(),
                trace: trace.as_ref(),
                bullet_plan: &bullet_plan,
            });
            run.waited += waiting.elapsed();
            run.session.status = SessionStatus::Drafting;

            match answer {
                None => return run.finish(Err(SchemeError::ChannelClosed), metrics),
                Some(fb) => {
                    run.emit(EventKind::FeedbackReceived, json!({"version": version, "feedback": fb}));
                    match fb {
                        Feedback::Accept => {
                            run.note(FeedbackSource::Human, "accept");
                            return match exec.tree {
                                Some(tree) => run.finish(Ok(tree), metrics),
                                None => run.finish(
                                    Err(SchemeError::ExecFailed("accepted candidate has no tree".into())),
                                    metrics,
                                ),
                            };
                        }
                        Feedback::Abort => {
                            run.note(FeedbackSource::Human, "abort");
                            return run.finish(Err(SchemeError::AbortedByUser), metrics);
                        }
                        Feedback::Comment(text) => {
                            run.note(FeedbackSource::Human, &text);
                            comments.push(text);
                        }
                    }
                }
            }
        }
        let rounds = self.config.hitl_max_rounds.max(1);
        run.finish(Err(SchemeError::RoundsExhausted { rounds }), metrics)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::ScriptedBackend;
    use crate::data;
    use crate::domain::builtin_domain;

    fn goal1() -> Goal {
        Goal::parse("is_inserted_to(gear1, shaft1)").unwrap()
    }

    #[test]
    fn feedback_parse() {
        assert_eq!(Feedback::parse(" Accept "), Feedback::Accept);
        assert_eq!(Feedback::parse("abort"), Feedback::Abort);
        assert_eq!(Feedback::parse("use the clampgripper"), Feedback::Comment("use the clampgripper".into()));
    }

    #[test]
    fn accept_first_candidate() {
        let g = builtin_domain("gearset").unwrap();
        let backend = ScriptedBackend::from_replies(["- put_down(...)".to_string(), data::REFERENCE_TREE.to_string()]);
        let mut ch = ScriptedFeedback::new([Feedback::Accept]);
        let (session, result) = Generator::new(&backend).hitl(&goal1(), &g.initial, &g.domain, &mut ch);
        assert!(result.is_ok());
        assert_eq!(ch.presented, vec![1]);
        assert_eq!(session.candidates.len(), 1);
        assert!(session.metrics.sr);
        assert!(session.calls[1].prompt.contains("- put_down(...)"));
    }

    #[test]
    fn comment_is_framed_in_next_prompt() {
        let g = builtin_domain("gearset").unwrap();
        let backend = ScriptedBackend::from_replies(["plan", "not a tree", "still not"]);
        let comment = "use the clampgripper, not the parallelgripper, for gears";
        let mut ch = ScriptedFeedback::new([Feedback::Comment(comment.into()), Feedback::Abort]);
        let (session, result) = Generator::new(&backend).hitl(&goal1(), &g.initial, &g.domain, &mut ch);
        assert_eq!(result.unwrap_err(), SchemeError::AbortedByUser);
        assert_eq!(session.status, SessionStatus::Failed);
        assert!(!session.calls[1].prompt.contains(comment));
        let second = &session.calls[2].prompt;
        assert!(second.contains(comment));
        assert!(second.contains("take priority"));
        assert_eq!(session.feedback.len(), 2);
    }

    #[test]
    fn closed_channel() {
        let g = builtin_domain("gearset").unwrap();
        let backend = ScriptedBackend::from_replies(["plan", "tree?"]);
        let mut ch = ScriptedFeedback::default();
        let (_, result) = Generator::new(&backend).hitl(&goal1(), &g.initial, &g.domain, &mut ch);
        assert_eq!(result.unwrap_err(), SchemeError::ChannelClosed);
    }
}
