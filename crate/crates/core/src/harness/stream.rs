use crate::error::{Error, Result};
use crate::kernel::Tensor;

/// Inputs with global class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
}

impl Split {
    pub fn new(inputs: Tensor, labels: Vec<usize>) -> Result<Self> {
        if inputs.shape().is_empty() || inputs.shape()[0] != labels.len() {
            return Err(Error::shape(
                "split",
                format!("inputs {:?} vs {} labels", inputs.shape(), labels.len()),
            ));
        }
        Ok(Split { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn select(&self, idx: &[usize]) -> Split {
        Split {
            inputs: self.inputs.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

/// One task: a contiguous block of global classes `offset .. offset + classes`.
#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    pub id: usize,
    pub offset: usize,
    pub classes: usize,
    pub train: Split,
    pub test: Split,
}

impl Task {
    /// Labels of a split shifted into `0 .. classes`.
    pub fn local_labels(&self, split: &Split) -> Result<Vec<usize>> {
        split
            .labels
            .iter()
            .map(|&y| {
                if y < self.offset || y >= self.offset + self.classes {
                    Err(Error::LabelOutOfRange {
                        label: y,
                        classes: self.offset + self.classes,
                    })
                } else {
                    Ok(y - self.offset)
                }
            })
            .collect()
    }

    pub fn owns(&self, global: usize) -> bool {
        global >= self.offset && global < self.offset + self.classes
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskStream {
    pub tasks: Vec<Task>,
}

impl TaskStream {
    /// Splits labelled data into tasks. `class_order[k]` is the original class
    /// that becomes global class `k`; consecutive chunks of `classes_per_task`
    /// form the tasks.
    pub fn from_labeled(train: &Split, test: &Split, class_order: &[usize], classes_per_task: usize) -> Result<Self> {
        if classes_per_task == 0 || class_order.is_empty() || !class_order.len().is_multiple_of(classes_per_task) {
            return Err(Error::InvalidArgument(format!(
                "{} classes cannot be chunked into tasks of {classes_per_task}",
                class_order.len()
            )));
        }
        let width = class_order.iter().max().map_or(0, |m| m + 1);
        let mut remap = vec![usize::MAX; width];
        for (k, &c) in class_order.iter().enumerate() {
            if remap[c] != usize::MAX {
                return Err(Error::InvalidArgument(format!("class {c} listed twice")));
            }
            remap[c] = k;
        }
        let relabel = |s: &Split| -> Result<Vec<usize>> {
            s.labels
                .iter()
                .map(|&y| match remap.get(y) {
                    Some(&k) if k != usize::MAX => Ok(k),
                    _ => Err(Error::LabelOutOfRange {
                        label: y,
                        classes: width,
                    }),
                })
                .collect()
        };
        let (train_y, test_y) = (relabel(train)?, relabel(test)?);
        let tasks = (0..class_order.len() / classes_per_task)
            .map(|t| {
                let offset = t * classes_per_task;
                let pick = |labels: &[usize]| -> Vec<usize> {
                    (0..labels.len())
                        .filter(|&i| labels[i] >= offset && labels[i] < offset + classes_per_task)
                        .collect()
                };
                let tr = pick(&train_y);
                let te = pick(&test_y);
                Ok(Task {
                    id: t,
                    offset,
                    classes: classes_per_task,
                    train: Split::new(train.inputs.select_rows(&tr), tr.iter().map(|&i| train_y[i]).collect())?,
                    test: Split::new(test.inputs.select_rows(&te), te.iter().map(|&i| test_y[i]).collect())?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        TaskStream::new(tasks)
    }

    pub fn new(tasks: Vec<Task>) -> Result<Self> {
        let mut next = 0;
        for (t, task) in tasks.iter().enumerate() {
            if task.id != t || task.offset != next {
                return Err(Error::InvalidArgument(format!(
                    "task {t} must start at class {next}, found offset {}",
                    task.offset
                )));
            }
            if task.train.is_empty() || task.test.is_empty() {
                return Err(Error::InvalidArgument(format!("task {t} has an empty split")));
            }
            task.local_labels(&task.train)?;
            task.local_labels(&task.test)?;
            next += task.classes;
        }
        Ok(TaskStream { tasks })
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn total_classes(&self) -> usize {
        self.tasks.iter().map(|t| t.classes).sum()
    }
}
