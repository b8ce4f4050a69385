#ifndef SE3CTRL_SE3CTRL_H
#define SE3CTRL_SE3CTRL_H

/* C interface to the se3ctrl core: dataset generation, training, evaluation,
 * visual-servoing experiments, plotting, and a model handle for encoding
 * observations and predicting pose dynamics.
 *
 * Every function returns SE3C_OK on success. On failure the return value
 * classifies the error and se3c_last_error() carries a message for the
 * calling thread. String arguments marked optional accept NULL or "".
 *
 * config_json is a JSON *document* (not a path); {} or NULL selects the
 * desk-scale defaults. Its schema mirrors the run configuration: keys seed,
 * dataset, net, loss, controller, train, control, sim.
 */

#ifdef __cplusplus
extern "C" {
#endif

typedef enum se3c_status {
  SE3C_OK = 0,
  SE3C_INVALID_ARGUMENT = 1,
  SE3C_IO_ERROR = 2,
  SE3C_RUNTIME_ERROR = 3
} se3c_status;

/* Message describing this thread's most recent failure ("" if none). The
 * pointer stays valid until the next failing call on the same thread. */
const char* se3c_last_error(void);

/* Generates a dataset (manifest.json + pairs/) into out_dir. The same config
 * and seed produce byte-identical output. */
se3c_status se3c_gen_data(const char* config_json, const char* out_dir);

/* Trains model_kind ("se3posenet" | "flownet") on the dataset; writes init/,
 * best/, last/ checkpoints and loss curves under out_dir. dataset_dir
 * (optional) overrides the config's dataset path. */
se3c_status se3c_train(const char* config_json, const char* model_kind, const char* dataset_dir,
                       const char* out_dir);

/* Scores a checkpoint on the dataset's validation split and writes a JSON
 * report to report_path. dataset_dir (optional) overrides the config. */
se3c_status se3c_eval(const char* config_json, const char* checkpoint_dir,
                      const char* dataset_dir, const char* report_path);

/* Runs seeded servoing tasks with a trained checkpoint. method is
 * "backprop", "gauss_newton", or "both" (optional; default "both");
 * n_tasks <= 0 uses the config value. Writes traces.csv and summary.json
 * under out_dir. Fails with SE3C_INVALID_ARGUMENT on an untrained
 * checkpoint. */
se3c_status se3c_control(const char* config_json, const char* checkpoint_dir, const char* method,
                         int n_tasks, const char* out_dir);

/* Renders convergence curves (mean abs joint error vs iteration, one curve
 * per method) from a traces.csv to a self-contained SVG. */
se3c_status se3c_plot(const char* traces_csv, const char* out_svg);

/* Opaque model handle loaded from a checkpoint directory. */
typedef struct se3c_model se3c_model;

se3c_status se3c_model_load(const char* checkpoint_dir, se3c_model** out);
void se3c_model_free(se3c_model* model);

/* Model geometry; any out-pointer may be NULL. kind_out receives
 * "se3posenet" or "flownet" (static storage). */
se3c_status se3c_model_info(const se3c_model* model, const char** kind_out, int* k, int* h, int* w,
                            int* n_ctrl, int* n_joints, int* uses_joint_angles, long long* step);

/* Encodes one observed point cloud to poses (se3posenet checkpoints only).
 * cloud: 3*h*w floats, channel-major camera-frame points. q: n_joints floats
 * (required iff the model uses joint angles, else must be NULL). pose_out:
 * k*6 floats, per part position xyz then axis-angle. */
se3c_status se3c_model_encode(se3c_model* model, const float* cloud, const float* q,
                              float* pose_out);

/* Predicted next poses for a control: pose (k*6) and u (n_ctrl) in,
 * composed next pose (k*6) out. q as in se3c_model_encode. */
se3c_status se3c_model_predict(se3c_model* model, const float* pose, const float* u,
                               const float* q, float* pose_out);

#ifdef __cplusplus
}
#endif

#endif /* SE3CTRL_SE3CTRL_H */
