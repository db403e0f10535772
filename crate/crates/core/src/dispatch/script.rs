//! Scheduler batch script for running every chord as one job-array task.

use super::resources::ClusterConfig;

/// How the payload line names the per-task input file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum InputNaming {
    /// `chord $SLURM_ARRAY_TASK_ID.in`, the canonical listing form.
    #[default]
    Listing,
    /// `chord_$SLURM_ARRAY_TASK_ID.in`, matching the files `split` writes.
    ChordFiles,
}

/// Job-array batch script for `n_tasks` chords. Tasks per node follow
/// `cores_per_node`; memory per CPU is the per-task request.
pub fn emit_batch_script(n_tasks: usize, config: &ClusterConfig, partition: &str) -> String {
    emit_batch_script_with(n_tasks, config, partition, InputNaming::Listing)
}

pub fn emit_batch_script_with(
    n_tasks: usize,
    config: &ClusterConfig,
    partition: &str,
    naming: InputNaming,
) -> String {
    assert!(n_tasks >= 1, "batch script needs at least one task");
    let input = match naming {
        InputNaming::Listing => "chord $SLURM_ARRAY_TASK_ID.in",
        InputNaming::ChordFiles => "chord_$SLURM_ARRAY_TASK_ID.in",
    };
    format!(
        "#!/bin/bash\n\
#SBATCH -p {partition}\n\
#SBATCH --array=1-{n_tasks}\n\
#SBATCH --cpus-per-task=1\n\
#SBATCH -n 1\n\
#SBATCH --ntasks-per-node={}\n\
#SBATCH --mem-per-cpu={}\n\
\n\
srun time cerfit < {input} \\\n\
>& fit_$SLURM_ARRAY_TASK_ID.out\n",
        config.cores_per_node, config.mem_per_task,
    )
}
