use rand::Rng;
use serde::{Deserialize, Serialize};

use super::scene::Scene;
use super::vocab::{token_id, Answer, Shape};

/// Attempts per scene before it is skipped.
pub const MAX_RESAMPLES: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Template {
    ColorOfShape,
    CountOfShape,
    ShapeExists,
    LeftmostShape,
}

impl Template {
    pub const ALL: [Template; 4] = [
        Template::ColorOfShape,
        Template::CountOfShape,
        Template::ShapeExists,
        Template::LeftmostShape,
    ];

    pub fn words(self, shape: Shape) -> Vec<&'static str> {
        match self {
            Template::ColorOfShape => vec!["what", "color", "is", "the", shape.name(), "?"],
            Template::CountOfShape => vec!["how", "many", shape.name(), "are", "there", "?"],
            Template::ShapeExists => vec!["is", "there", "a", shape.name(), "?"],
            Template::LeftmostShape => vec!["what", "shape", "is", "leftmost", "?"],
        }
    }
}

/// A question instantiated against a concrete scene.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Posed {
    pub template: Template,
    /// Shape argument; unused by `LeftmostShape`.
    pub shape: Shape,
    pub tokens: Vec<usize>,
    pub answer: Answer,
}

/// Answer of `template(shape)` on `scene`, or `None` when the instantiation is
/// ambiguous (no such shape, or several with different colors; tied leftmost
/// objects of different shapes).
pub fn answer_for(scene: &Scene, template: Template, shape: Shape) -> Option<Answer> {
    let matching = scene.objects.iter().filter(|o| o.shape == shape);
    match template {
        Template::ColorOfShape => {
            let mut colors = matching.map(|o| o.color);
            let first = colors.next()?;
            colors.all(|c| c == first).then_some(Answer::Color(first))
        }
        Template::CountOfShape => Some(Answer::Count(matching.count())),
        Template::ShapeExists => Some(if matching.count() > 0 { Answer::Yes } else { Answer::No }),
        Template::LeftmostShape => {
            let min_x = scene.objects.iter().map(|o| o.bbox.x_min).min()?;
            let mut shapes = scene.objects.iter().filter(|o| o.bbox.x_min == min_x).map(|o| o.shape);
            let first = shapes.next()?;
            shapes.all(|s| s == first).then_some(Answer::Shape(first))
        }
    }
}

/// Draw shape arguments until `template` has an unambiguous answer on `scene`.
/// Returns `None` after [`MAX_RESAMPLES`] failed draws.
pub fn pose_question<R: Rng + ?Sized>(scene: &Scene, template: Template, rng: &mut R) -> Option<Posed> {
    for _ in 0..MAX_RESAMPLES {
        let shape = Shape::ALL[rng.random_range(0..3)];
        if let Some(answer) = answer_for(scene, template, shape) {
            let tokens = template
                .words(shape)
                .into_iter()
                .map(|w| token_id(w).expect("template word in vocabulary"))
                .collect();
            return Some(Posed {
                template,
                shape,
                tokens,
                answer,
            });
        }
    }
    None
}
